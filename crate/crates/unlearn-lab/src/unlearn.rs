//! The unified first-order unlearning update and everything derived from it:
//! gradient ascent, fine-tuning with random labels, adversarial-sample
//! unlearning, and the ascent+descent / ascent+KL hybrids; plus the exact
//! retraining oracle and a damped Newton step for the convex bigram.
//!
//! Every method is one choice of per-position reference distribution, a sign
//! on the forget term, and an optional retain term. A single optimizer step
//! descends on
//!
//!   forget_coeff * sign * CE(P_M, Q; forget positions)
//!   + retain_coeff * retain_loss(retain positions)
//!
//! where CE against the true-token delta is exactly the training NLL, so
//! (delta-true, ascent, no retain term) negates a standard training step.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::corpus::{CorpusSplits, Sequence, Token};
use crate::error::{Error, Result};
use crate::eval::{type2_violation, BehavioralConstraint};
use crate::lm::{
    grouped_loss_step, mean_nll, prefix_distributions, Arch, BatchItem, ModelParams, Optimizer,
    OptimizerKind, Role, StepStats, TrainConfig,
};
use crate::tensor::Tensor;

/// Per-position reference distribution Q in the unified objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceDist {
    /// Point mass on the true next token.
    DeltaTrueToken,
    /// Uniform over the vocabulary.
    Uniform,
    /// Point mass on the most confusing wrong token.
    DeltaAdversarial,
}

/// Sign applied to the forget term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetSign {
    /// Maximize the forget cross-entropy (gradient ascent).
    Ascent,
    /// Plain descent toward the reference distribution.
    Descent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetainTerm {
    None,
    /// NLL descent on the retain batch.
    DescentOnRetain,
    /// KL(vanilla || current) on the retain batch, vanilla as teacher.
    KlToVanilla,
}

/// Which pool the retain batches are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetainDataKind {
    /// The retain sample R (same domain as the forget set).
    InDistribution,
    /// The held-out general set G.
    General,
}

/// One instance of the unified unlearning objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub reference: ReferenceDist,
    pub forget_sign: ForgetSign,
    pub retain_term: RetainTerm,
    pub retain_data: RetainDataKind,
    pub forget_coefficient: f64,
    pub retain_coefficient: f64,
}

impl MethodSpec {
    pub fn gradient_ascent() -> Self {
        MethodSpec {
            reference: ReferenceDist::DeltaTrueToken,
            forget_sign: ForgetSign::Ascent,
            retain_term: RetainTerm::None,
            retain_data: RetainDataKind::InDistribution,
            forget_coefficient: 1.0,
            retain_coefficient: 1.0,
        }
    }

    pub fn random_labels() -> Self {
        MethodSpec {
            reference: ReferenceDist::Uniform,
            forget_sign: ForgetSign::Descent,
            ..Self::gradient_ascent()
        }
    }

    pub fn adversarial() -> Self {
        MethodSpec {
            reference: ReferenceDist::DeltaAdversarial,
            forget_sign: ForgetSign::Descent,
            ..Self::gradient_ascent()
        }
    }

    pub fn ascent_descent(data: RetainDataKind) -> Self {
        MethodSpec {
            retain_term: RetainTerm::DescentOnRetain,
            retain_data: data,
            ..Self::gradient_ascent()
        }
    }

    pub fn ascent_kl(data: RetainDataKind) -> Self {
        MethodSpec {
            retain_term: RetainTerm::KlToVanilla,
            retain_data: data,
            ..Self::gradient_ascent()
        }
    }

    pub fn from_kind(kind: MethodKind) -> Self {
        match kind {
            MethodKind::GradientAscent => Self::gradient_ascent(),
            MethodKind::RandomLabels => Self::random_labels(),
            MethodKind::Adversarial => Self::adversarial(),
            MethodKind::AscentDescentInDist => Self::ascent_descent(RetainDataKind::InDistribution),
            MethodKind::AscentDescentGeneral => Self::ascent_descent(RetainDataKind::General),
            MethodKind::AscentKlInDist => Self::ascent_kl(RetainDataKind::InDistribution),
            MethodKind::AscentKlGeneral => Self::ascent_kl(RetainDataKind::General),
        }
    }

    /// The named method this spec instantiates, if its shape matches one.
    pub fn kind(&self) -> Option<MethodKind> {
        MethodKind::ALL
            .into_iter()
            .find(|&k| {
                let m = Self::from_kind(k);
                m.reference == self.reference
                    && m.forget_sign == self.forget_sign
                    && m.retain_term == self.retain_term
                    && (m.retain_term == RetainTerm::None || m.retain_data == self.retain_data)
            })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.forget_coefficient.is_finite() || !self.retain_coefficient.is_finite() {
            return Err(Error::InvalidConfig("method coefficients must be finite".into()));
        }
        Ok(())
    }
}

/// The seven named methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    GradientAscent,
    RandomLabels,
    Adversarial,
    AscentDescentInDist,
    AscentDescentGeneral,
    AscentKlInDist,
    AscentKlGeneral,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::GradientAscent,
        MethodKind::RandomLabels,
        MethodKind::Adversarial,
        MethodKind::AscentDescentInDist,
        MethodKind::AscentDescentGeneral,
        MethodKind::AscentKlInDist,
        MethodKind::AscentKlGeneral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::GradientAscent => "gradient-ascent",
            MethodKind::RandomLabels => "random-labels",
            MethodKind::Adversarial => "adversarial",
            MethodKind::AscentDescentInDist => "ga-descent-in-dist",
            MethodKind::AscentDescentGeneral => "ga-descent-general",
            MethodKind::AscentKlInDist => "ga-kl-in-dist",
            MethodKind::AscentKlGeneral => "ga-kl-general",
        }
    }

    /// Human-readable row label for tables.
    pub fn label(self) -> &'static str {
        match self {
            MethodKind::GradientAscent => "Gradient Ascent (GA)",
            MethodKind::RandomLabels => "Fine-tuning with Random Label",
            MethodKind::Adversarial => "Unlearning with adversarial samples",
            MethodKind::AscentDescentInDist => "GA + Descent on in-distribution data",
            MethodKind::AscentDescentGeneral => "GA + Descent on general data",
            MethodKind::AscentKlInDist => "GA + KL on in-distribution data",
            MethodKind::AscentKlGeneral => "GA + KL on general data",
        }
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which positions of a forget sequence carry loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPositions {
    All,
    /// Only the final next-token position (targeted forbidden pairs).
    LastOnly,
}

/// One forget-batch element.
#[derive(Clone, Debug)]
pub struct ForgetItem {
    pub tokens: Sequence,
    pub positions: LossPositions,
}

impl ForgetItem {
    pub fn whole(tokens: &[Token]) -> Self {
        ForgetItem {
            tokens: tokens.to_vec(),
            positions: LossPositions::All,
        }
    }
}

/// The reference distribution Q for one position.
pub fn reference_distribution(
    spec: &MethodSpec,
    model: &ModelParams,
    prefix: &[Token],
    true_token: Token,
) -> Result<Vec<f64>> {
    let vocab = model.vocab();
    if true_token >= vocab {
        return Err(Error::OutOfVocab {
            token: true_token,
            vocab,
        });
    }
    match spec.reference {
        ReferenceDist::Uniform => Ok(vec![1.0 / vocab as f64; vocab]),
        ReferenceDist::DeltaTrueToken => {
            let mut q = vec![0.0; vocab];
            q[true_token] = 1.0;
            Ok(q)
        }
        ReferenceDist::DeltaAdversarial => {
            let adv = adversarial_token(model, prefix, true_token)?;
            let mut q = vec![0.0; vocab];
            q[adv] = 1.0;
            Ok(q)
        }
    }
}

/// The most likely token other than the true one; ties break to the lowest
/// token id.
pub fn adversarial_token(model: &ModelParams, prefix: &[Token], true_token: Token) -> Result<Token> {
    let dist = prefix_distributions(model, prefix)?;
    let row = dist.last().expect("non-empty prefix");
    argmax_excluding(row, true_token)
}

fn argmax_excluding(probs: &[f64], excluded: Token) -> Result<Token> {
    if probs.len() < 2 {
        return Err(Error::VocabTooSmall(probs.len()));
    }
    let mut best: Option<usize> = None;
    for (i, &p) in probs.iter().enumerate() {
        if i == excluded {
            continue;
        }
        if best.map_or(true, |b| p > probs[b]) {
            best = Some(i);
        }
    }
    Ok(best.expect("vocab of at least 2 leaves a candidate"))
}

/// Build the loss-carrying batch items for a forget batch under `spec`.
fn forget_batch_items(model: &ModelParams, forget: &[ForgetItem], spec: &MethodSpec) -> Result<Vec<BatchItem>> {
    let vocab = model.vocab();
    let mut items = Vec::with_capacity(forget.len());
    for f in forget {
        if f.tokens.len() < 2 {
            return Err(Error::SequenceTooShort(f.tokens.len()));
        }
        let rows = f.tokens.len() - 1;
        // Current-model distributions, needed only for adversarial targets.
        let model_rows = match spec.reference {
            ReferenceDist::DeltaAdversarial => Some(prefix_distributions(model, &f.tokens[..rows])?),
            _ => None,
        };
        let mut targets = Tensor::zeros(vec![rows, vocab]);
        for r in 0..rows {
            if f.positions == LossPositions::LastOnly && r != rows - 1 {
                continue;
            }
            let truth = f.tokens[r + 1];
            if truth >= vocab {
                return Err(Error::OutOfVocab { token: truth, vocab });
            }
            match spec.reference {
                ReferenceDist::Uniform => {
                    for v in 0..vocab {
                        targets.data[r * vocab + v] = 1.0 / vocab as f64;
                    }
                }
                ReferenceDist::DeltaTrueToken => {
                    targets.data[r * vocab + truth] = 1.0;
                }
                ReferenceDist::DeltaAdversarial => {
                    let adv = argmax_excluding(&model_rows.as_ref().unwrap()[r], truth)?;
                    targets.data[r * vocab + adv] = 1.0;
                }
            }
        }
        items.push(BatchItem {
            tokens: f.tokens.clone(),
            targets,
        });
    }
    Ok(items)
}

/// Retain-term batch items: one-hot NLL targets for descent, the vanilla
/// model's next-token distributions for the KL term.
fn retain_batch_items(
    retain: &[Sequence],
    term: RetainTerm,
    vanilla: Option<&ModelParams>,
    vocab: usize,
) -> Result<Vec<BatchItem>> {
    match term {
        RetainTerm::None => Ok(vec![]),
        RetainTerm::DescentOnRetain => retain.iter().map(|s| BatchItem::training(s, vocab)).collect(),
        RetainTerm::KlToVanilla => {
            let vanilla = vanilla.ok_or_else(|| {
                Error::InvalidConfig("KL retain term needs the vanilla snapshot".into())
            })?;
            retain
                .iter()
                .map(|s| {
                    if s.len() < 2 {
                        return Err(Error::SequenceTooShort(s.len()));
                    }
                    let rows = prefix_distributions(vanilla, &s[..s.len() - 1])?;
                    let data: Vec<f64> = rows.iter().flatten().copied().collect();
                    Ok(BatchItem {
                        tokens: s.clone(),
                        targets: Tensor::matrix(rows.len(), vocab, data),
                    })
                })
                .collect()
        }
    }
}

/// One optimizer step of the unified objective on a forget batch and an
/// optional retain batch. The retain batch must be non-empty exactly when
/// the method has a retain term; `vanilla` is required for the KL term.
#[allow(clippy::too_many_arguments)]
pub fn unified_step(
    model: &mut ModelParams,
    forget: &[ForgetItem],
    retain: &[Sequence],
    vanilla: Option<&ModelParams>,
    spec: &MethodSpec,
    opt: &mut Optimizer,
    lr: f64,
    max_grad_norm: Option<f64>,
    step_index: usize,
) -> Result<StepStats> {
    spec.validate()?;
    if forget.is_empty() {
        return Err(Error::EmptyData);
    }
    if (spec.retain_term == RetainTerm::None) != retain.is_empty() {
        return Err(Error::InvalidConfig(
            "retain batch must be non-empty exactly when the method has a retain term".into(),
        ));
    }

    let forget_items = forget_batch_items(model, forget, spec)?;
    let sign = match spec.forget_sign {
        ForgetSign::Ascent => -1.0,
        ForgetSign::Descent => 1.0,
    };
    let forget_coeff = sign * spec.forget_coefficient;
    let retain_items = retain_batch_items(retain, spec.retain_term, vanilla, model.vocab())?;

    if retain_items.is_empty() {
        grouped_loss_step(model, &[(&forget_items, forget_coeff)], opt, lr, max_grad_norm, step_index)
    } else {
        grouped_loss_step(
            model,
            &[(&forget_items, forget_coeff), (&retain_items, spec.retain_coefficient)],
            opt,
            lr,
            max_grad_norm,
            step_index,
        )
    }
}

/// Mean KL(vanilla || model) over every position of the retain batch.
pub fn kl_retain_term(model: &ModelParams, vanilla: &ModelParams, retain: &[Sequence]) -> Result<f64> {
    if retain.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut total = 0.0;
    let mut positions = 0usize;
    for seq in retain {
        if seq.len() < 2 {
            return Err(Error::SequenceTooShort(seq.len()));
        }
        let prefix = &seq[..seq.len() - 1];
        let rows_v = prefix_distributions(vanilla, prefix)?;
        let rows_m = prefix_distributions(model, prefix)?;
        for (pv, pm) in rows_v.iter().zip(&rows_m) {
            total += crate::eval::kl_divergence(pv, pm);
            positions += 1;
        }
    }
    Ok(total / positions as f64)
}

/// When an unlearning run stops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum StopRule {
    FixedSteps,
    /// Stop once forget-set perplexity reaches `target` within a relative
    /// tolerance (checked before each step).
    ReachForgetPpl { target: f64, rel_tol: f64 },
}

/// A configured unlearning run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnlearnRun {
    pub method: MethodSpec,
    pub lr: f64,
    /// Optimizer-step budget.
    pub steps: usize,
    /// The forget set is covered in this many equal batches per pass.
    pub batches: usize,
    pub stop: StopRule,
    pub optimizer: OptimizerKind,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl UnlearnRun {
    /// Paper-regime defaults: 4 batches per pass over U, budget 64, Adam,
    /// clip at norm 1.
    pub fn desk_default(method: MethodSpec, stop: StopRule) -> Self {
        UnlearnRun {
            method,
            lr: 1e-3,
            steps: 64,
            batches: 4,
            stop,
            optimizer: OptimizerKind::adam_default(),
            max_grad_norm: Some(1.0),
            seed: 0,
        }
    }
}

/// Per-step trace entry. Perplexities are measured after the step; the
/// retain column uses the retain sample R (or full retain when R is empty).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub forget_ppl: f64,
    pub retain_ppl: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    /// Sup forbidden-pair probability, for targeted runs.
    pub violation: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<StepRecord>,
    /// Whether the stop rule's target was met (always true for FixedSteps).
    pub target_reached: bool,
    pub clip_events: usize,
    pub nan_events: usize,
}

fn ppl(model: &ModelParams, data: &[Sequence]) -> Result<f64> {
    Ok(mean_nll(model, data)?.exp())
}

/// Run unlearning from `vanilla` against the splits. Returns the unlearned
/// model and the full trace; on a NaN event the last finite model is
/// returned with the event flagged.
pub fn run_unlearning(vanilla: &ModelParams, splits: &CorpusSplits, run: &UnlearnRun) -> Result<(ModelParams, Trace)> {
    run.method.validate()?;
    if run.batches == 0 {
        return Err(Error::InvalidConfig("batch count must be positive".into()));
    }
    if splits.forget.is_empty() {
        return Err(Error::EmptyData);
    }

    let mut model = vanilla.clone().with_role(Role::Unlearned);
    let mut opt = Optimizer::new(run.optimizer, &model);
    let mut trace = Trace::default();

    let batch_count = run.batches.min(splits.forget.len());
    let chunk = splits.forget.len().div_ceil(batch_count);
    let forget_batches: Vec<Vec<ForgetItem>> = splits
        .forget
        .chunks(chunk)
        .map(|c| c.iter().map(|s| ForgetItem::whole(s)).collect())
        .collect();

    let needs_retain = run.method.retain_term != RetainTerm::None;
    let retain_pool: &[Sequence] = match run.method.retain_data {
        RetainDataKind::InDistribution => &splits.retain_sample,
        RetainDataKind::General => &splits.general,
    };
    if needs_retain && retain_pool.is_empty() {
        return Err(Error::InvalidConfig(
            "method needs retain data but the configured pool is empty".into(),
        ));
    }
    let mut retain_order: Vec<usize> = (0..retain_pool.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(run.seed);
    for i in (1..retain_order.len()).rev() {
        let j = rng.gen_range(0..=i);
        retain_order.swap(i, j);
    }
    let mut retain_cursor = 0usize;

    let trace_retain: &[Sequence] = if splits.retain_sample.is_empty() {
        &splits.retain
    } else {
        &splits.retain_sample
    };

    let mut current_forget_ppl = ppl(&model, &splits.forget)?;
    for step in 0..run.steps {
        if let StopRule::ReachForgetPpl { target, rel_tol } = run.stop {
            if current_forget_ppl >= target * (1.0 - rel_tol) {
                trace.target_reached = true;
                break;
            }
        }
        let forget_batch = &forget_batches[step % forget_batches.len()];
        let retain_batch: Vec<Sequence> = if needs_retain {
            // Token-matched: as many retain sequences as the forget batch.
            (0..forget_batch.len())
                .map(|_| {
                    let s = retain_pool[retain_order[retain_cursor % retain_order.len()]].clone();
                    retain_cursor += 1;
                    s
                })
                .collect()
        } else {
            vec![]
        };

        let last_good = model.clone();
        let stats = match unified_step(
            &mut model,
            forget_batch,
            &retain_batch,
            Some(vanilla),
            &run.method,
            &mut opt,
            run.lr,
            run.max_grad_norm,
            step,
        ) {
            Ok(stats) => stats,
            Err(Error::NanLoss { .. }) => {
                trace.nan_events += 1;
                model = last_good;
                break;
            }
            Err(e) => return Err(e),
        };

        let forget_ppl = ppl(&model, &splits.forget)?;
        if !forget_ppl.is_finite() || !model.all_finite() {
            trace.nan_events += 1;
            model = last_good;
            break;
        }
        let retain_ppl = ppl(&model, trace_retain)?;
        if stats.clipped {
            trace.clip_events += 1;
        }
        trace.steps.push(StepRecord {
            forget_ppl,
            retain_ppl,
            grad_norm: stats.grad_norm,
            clipped: stats.clipped,
            violation: None,
        });
        current_forget_ppl = forget_ppl;
    }

    match run.stop {
        StopRule::FixedSteps => trace.target_reached = true,
        StopRule::ReachForgetPpl { target, rel_tol } => {
            if current_forget_ppl >= target * (1.0 - rel_tol) {
                trace.target_reached = true;
            }
        }
    }
    Ok((model, trace))
}

/// Gradient ascent driven by a type-II constraint: ascend on the forbidden
/// (prefix, token) pairs until the sup probability drops to xi (checked
/// before each step) or the budget runs out.
pub fn run_targeted_unlearning(
    vanilla: &ModelParams,
    constraint: &BehavioralConstraint,
    lr: f64,
    steps: usize,
    optimizer: OptimizerKind,
    max_grad_norm: Option<f64>,
) -> Result<(ModelParams, Trace)> {
    constraint.validate()?;
    let (forbidden, xi) = match constraint {
        BehavioralConstraint::TypeII { forbidden, xi } => (forbidden, *xi),
        BehavioralConstraint::TypeI { .. } => {
            return Err(Error::InvalidConfig("targeted unlearning needs a type-II constraint".into()))
        }
    };
    let items: Vec<ForgetItem> = forbidden
        .iter()
        .map(|p| {
            let mut tokens = p.prefix.clone();
            tokens.push(p.token);
            ForgetItem {
                tokens,
                positions: LossPositions::LastOnly,
            }
        })
        .collect();
    let spec = MethodSpec::gradient_ascent();

    let mut model = vanilla.clone().with_role(Role::Unlearned);
    let mut opt = Optimizer::new(optimizer, &model);
    let mut trace = Trace::default();
    let mut violation = type2_violation(&model, constraint)?;

    for step in 0..steps {
        if violation <= xi {
            trace.target_reached = true;
            break;
        }
        let last_good = model.clone();
        let stats = match unified_step(&mut model, &items, &[], Some(vanilla), &spec, &mut opt, lr, max_grad_norm, step)
        {
            Ok(stats) => stats,
            Err(Error::NanLoss { .. }) => {
                trace.nan_events += 1;
                model = last_good;
                break;
            }
            Err(e) => return Err(e),
        };
        if !model.all_finite() {
            trace.nan_events += 1;
            model = last_good;
            break;
        }
        violation = type2_violation(&model, constraint)?;
        // Pair-set "perplexity": exp of the mean forbidden-pair NLL.
        let mut nll = 0.0;
        for pair in forbidden {
            let dist = crate::lm::next_token_distribution(&model, &pair.prefix)?;
            nll -= dist[pair.token].max(crate::autodiff::PROB_FLOOR).ln();
        }
        if stats.clipped {
            trace.clip_events += 1;
        }
        trace.steps.push(StepRecord {
            forget_ppl: (nll / forbidden.len() as f64).exp(),
            retain_ppl: f64::NAN,
            grad_norm: stats.grad_norm,
            clipped: stats.clipped,
            violation: Some(violation),
        });
    }
    if violation <= xi {
        trace.target_reached = true;
    }
    Ok((model, trace))
}

/// The gold standard: a fresh model trained on D minus U only. The decoder
/// retrains with `cfg`; the convex bigram is fit to stationarity so the
/// oracle sits at its optimum.
pub fn retrain_oracle(arch: &Arch, splits: &CorpusSplits, cfg: &TrainConfig) -> Result<ModelParams> {
    match arch {
        Arch::TinyDecoder(dc) => {
            let fresh = ModelParams::new_decoder(dc.clone(), cfg.seed)?;
            Ok(crate::lm::train(&fresh, &splits.retain, cfg)?.with_role(Role::Retrained))
        }
        Arch::Bigram { vocab } => {
            let counts = bigram_counts(&splits.retain, *vocab)?;
            let w = fit_bigram_mle(*vocab, &counts, 1e-10, 300)?;
            let mut model = ModelParams::new_bigram(*vocab)?;
            *model.param_mut("w").expect("bigram weight") = w;
            Ok(model.with_role(Role::Retrained))
        }
    }
}

// ---------------------------------------------------------------------------
// Convex bigram: counts, analytic gradient/Hessian, damped Newton step.
//
// With mean-per-token NLL L(W) = (1/N) sum_c [ n_c logsumexp(W_c) - C_c.W_c ],
// block c has gradient (n_c p - C_c)/N and Hessian (n_c/N)(diag p - p p^T),
// which is PSD with null vector 1 (softmax shift gauge); damping makes it
// definite.
// ---------------------------------------------------------------------------

/// Bigram sufficient statistics.
#[derive(Clone, Debug)]
pub struct BigramCounts {
    pub vocab: usize,
    /// next[c * vocab + v] = number of (c -> v) transitions.
    pub next: Vec<f64>,
    /// Occurrences of each context token (row sums).
    pub context_totals: Vec<f64>,
    /// Total transition count N.
    pub total: f64,
}

pub fn bigram_counts(data: &[Sequence], vocab: usize) -> Result<BigramCounts> {
    let mut next = vec![0.0; vocab * vocab];
    for seq in data {
        for w in seq.windows(2) {
            if w[0] >= vocab || w[1] >= vocab {
                return Err(Error::OutOfVocab {
                    token: w[0].max(w[1]),
                    vocab,
                });
            }
            next[w[0] * vocab + w[1]] += 1.0;
        }
    }
    let context_totals: Vec<f64> = (0..vocab).map(|c| next[c * vocab..(c + 1) * vocab].iter().sum()).collect();
    let total = context_totals.iter().sum();
    Ok(BigramCounts {
        vocab,
        next,
        context_totals,
        total,
    })
}

/// counts(D) - counts(U); errors if U is not a sub-multiset of D.
pub fn subtract_counts(d: &BigramCounts, u: &BigramCounts) -> Result<BigramCounts> {
    if d.vocab != u.vocab {
        return Err(Error::InvalidConfig("count vocabularies differ".into()));
    }
    let mut next = d.next.clone();
    for (n, &uu) in next.iter_mut().zip(&u.next) {
        *n -= uu;
        if *n < 0.0 {
            return Err(Error::InvalidConfig("forget counts exceed train counts".into()));
        }
    }
    let context_totals: Vec<f64> = (0..d.vocab)
        .map(|c| next[c * d.vocab..(c + 1) * d.vocab].iter().sum())
        .collect();
    let total = context_totals.iter().sum();
    Ok(BigramCounts {
        vocab: d.vocab,
        next,
        context_totals,
        total,
    })
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Mean per-token NLL of bigram weights on counted data.
pub fn bigram_nll_per_token(w: &Tensor, counts: &BigramCounts) -> f64 {
    let v = counts.vocab;
    let mut total = 0.0;
    for c in 0..v {
        if counts.context_totals[c] == 0.0 {
            continue;
        }
        let row = &w.data[c * v..(c + 1) * v];
        let p = softmax_row(row);
        for (j, &cnt) in counts.next[c * v..(c + 1) * v].iter().enumerate() {
            if cnt > 0.0 {
                total -= cnt * p[j].max(crate::autodiff::PROB_FLOOR).ln();
            }
        }
    }
    total / counts.total
}

/// L2 norm of the mean-per-token NLL gradient.
pub fn bigram_grad_norm(w: &Tensor, counts: &BigramCounts) -> f64 {
    let v = counts.vocab;
    let mut total = 0.0;
    for c in 0..v {
        let n_c = counts.context_totals[c];
        if n_c == 0.0 {
            continue;
        }
        let p = softmax_row(&w.data[c * v..(c + 1) * v]);
        for j in 0..v {
            let g = (n_c * p[j] - counts.next[c * v + j]) / counts.total;
            total += g * g;
        }
    }
    total.sqrt()
}

/// Damping that scales with the problem: `1e-6 * mean Hessian diagonal`.
pub fn default_newton_damping(w: &Tensor, counts: &BigramCounts) -> f64 {
    let v = counts.vocab;
    let mut diag_sum = 0.0;
    for c in 0..v {
        let n_c = counts.context_totals[c];
        if n_c == 0.0 {
            continue;
        }
        let p = softmax_row(&w.data[c * v..(c + 1) * v]);
        for &pj in &p {
            diag_sum += (n_c / counts.total) * pj * (1.0 - pj);
        }
    }
    1e-6 * diag_sum / (v * v) as f64
}

/// In-place Cholesky solve of a symmetric positive-definite system; None if
/// a pivot collapses.
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    // Factor A = L L^T, overwriting the lower triangle.
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    // Solve L y = b, then L^T x = y.
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= a[i * n + k] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            x[i] -= a[k * n + i] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    Some(x)
}

/// One damped Newton step of the mean-per-token NLL on `counts`, in place.
/// Returns the L2 norm of the parameter step.
pub fn bigram_newton_step(w: &mut Tensor, counts: &BigramCounts, damping: f64) -> Result<f64> {
    let v = counts.vocab;
    let mut step_sq = 0.0;
    for c in 0..v {
        let n_c = counts.context_totals[c];
        if n_c == 0.0 {
            continue;
        }
        let scale = n_c / counts.total;
        let p = softmax_row(&w.data[c * v..(c + 1) * v]);
        let g: Vec<f64> = (0..v).map(|j| scale * p[j] - counts.next[c * v + j] / counts.total).collect();
        let mut h = vec![0.0; v * v];
        for i in 0..v {
            for j in 0..v {
                let mut val = -scale * p[i] * p[j];
                if i == j {
                    val += scale * p[i] + damping;
                }
                h[i * v + j] = val;
            }
        }
        let delta = cholesky_solve(&mut h, &g, v).ok_or(Error::SingularNewtonBlock { context: c })?;
        for (j, d) in delta.iter().enumerate() {
            w.data[c * v + j] -= d;
            step_sq += d * d;
        }
    }
    Ok(step_sq.sqrt())
}

/// Fit bigram weights to the count MLE by damped Newton iteration, from
/// zero initialization, until the mean gradient norm drops below `grad_tol`.
/// A halving line search guards against Newton overshoot when zero-count
/// cells push the optimum toward infinity.
pub fn fit_bigram_mle(vocab: usize, counts: &BigramCounts, grad_tol: f64, max_iters: usize) -> Result<Tensor> {
    if counts.total == 0.0 {
        return Err(Error::EmptyData);
    }
    let mut w = Tensor::zeros(vec![vocab, vocab]);
    let mut nll = bigram_nll_per_token(&w, counts);
    for _ in 0..max_iters {
        if bigram_grad_norm(&w, counts) < grad_tol {
            break;
        }
        let damping = default_newton_damping(&w, counts).max(1e-300);
        let previous = w.clone();
        bigram_newton_step(&mut w, counts, damping)?;
        let mut after = bigram_nll_per_token(&w, counts);
        let mut halvings = 0;
        while (!after.is_finite() || after > nll + 1e-15) && halvings < 60 {
            for (x, &p) in w.data.iter_mut().zip(&previous.data) {
                *x = 0.5 * (*x + p);
            }
            after = bigram_nll_per_token(&w, counts);
            halvings += 1;
        }
        nll = after;
    }
    Ok(w)
}

/// The appendix-style second-order unlearning update for the convex bigram:
/// one damped Newton step of the NLL on D minus U, starting from the vanilla
/// weights (assumed near-stationary on D).
pub fn newton_unlearn_bigram(
    vanilla: &ModelParams,
    train_data: &[Sequence],
    forget: &[Sequence],
    damping: Option<f64>,
) -> Result<ModelParams> {
    let vocab = match vanilla.arch {
        Arch::Bigram { vocab } => vocab,
        Arch::TinyDecoder(_) => {
            return Err(Error::InvalidConfig(
                "Newton unlearning is implemented for the convex bigram only".into(),
            ))
        }
    };
    let d = bigram_counts(train_data, vocab)?;
    let u = bigram_counts(forget, vocab)?;
    let retained = subtract_counts(&d, &u)?;
    if retained.total == 0.0 {
        return Err(Error::EmptyData);
    }
    let mut model = vanilla.clone().with_role(Role::Unlearned);
    let w = model.param_mut("w").expect("bigram weight");
    let damping = damping.unwrap_or_else(|| default_newton_damping(w, &retained));
    bigram_newton_step(w, &retained, damping)?;
    Ok(model)
}
