//! Evaluation: per-split perplexity and next-token accuracy, Min-K% Prob
//! membership inference with AUC, approximate-retraining targets, and the
//! behavioral measures (type-I Renyi closeness to a retrained model, type-II
//! sup-probability of forbidden outputs).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::PROB_FLOOR;
use crate::corpus::{Sequence, Token};
use crate::error::{Error, Result};
use crate::lm::{corpus_nll, prefix_distributions, ModelParams, Role};

/// exp(total NLL / total predicted tokens) over a dataset.
pub fn perplexity(model: &ModelParams, data: &[Sequence]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let (total, positions) = corpus_nll(model, data)?;
    Ok((total / positions as f64).exp())
}

/// Fraction of positions whose argmax next-token prediction (ties to the
/// lowest id) equals the true token. Length-1 sequences contribute nothing.
pub fn next_token_accuracy(model: &ModelParams, data: &[Sequence]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut hits = 0usize;
    let mut positions = 0usize;
    for seq in data {
        if seq.len() < 2 {
            continue;
        }
        let rows = prefix_distributions(model, &seq[..seq.len() - 1])?;
        for (row, &truth) in rows.iter().zip(&seq[1..]) {
            let mut best = 0usize;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            if best == truth {
                hits += 1;
            }
            positions += 1;
        }
    }
    if positions == 0 {
        return Err(Error::EmptyData);
    }
    Ok(hits as f64 / positions as f64)
}

/// Per-token log-probabilities of a sequence under the model.
pub fn token_log_probs(model: &ModelParams, seq: &[Token]) -> Result<Vec<f64>> {
    if seq.len() < 2 {
        return Err(Error::SequenceTooShort(seq.len()));
    }
    let rows = prefix_distributions(model, &seq[..seq.len() - 1])?;
    Ok(rows
        .iter()
        .zip(&seq[1..])
        .map(|(row, &t)| row[t].max(PROB_FLOOR).ln())
        .collect())
}

/// Min-K% Prob membership score: the mean of the lowest ceil(k% * T)
/// per-token log-probabilities. Higher means more member-like.
pub fn min_k_score(model: &ModelParams, seq: &[Token], k_percent: f64) -> Result<f64> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidConfig(format!("k percent {k_percent} must lie in (0, 100]")));
    }
    let log_probs = token_log_probs(model, seq)?;
    Ok(min_k_of_scores(&log_probs, k_percent))
}

/// The Min-K% aggregation itself, on precomputed log-probabilities.
pub fn min_k_of_scores(log_probs: &[f64], k_percent: f64) -> f64 {
    let t = log_probs.len();
    let m = ((k_percent / 100.0 * t as f64).ceil() as usize).clamp(1, t);
    let mut sorted = log_probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[..m].iter().sum::<f64>() / m as f64
}

/// Probability that a random member outscores a random non-member, ties
/// counted one half (Mann-Whitney midranks).
pub fn auc(member_scores: &[f64], non_member_scores: &[f64]) -> Result<f64> {
    let (n_m, n_n) = (member_scores.len(), non_member_scores.len());
    if n_m == 0 || n_n == 0 {
        return Err(Error::EmptyData);
    }
    let mut pool: Vec<(f64, bool)> = member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(non_member_scores.iter().map(|&s| (s, false)))
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut member_rank_sum = 0.0f64;
    let mut i = 0usize;
    while i < pool.len() {
        let mut j = i;
        while j < pool.len() && pool[j].0 == pool[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        let members_in_tie = pool[i..j].iter().filter(|e| e.1).count();
        member_rank_sum += midrank * members_in_tie as f64;
        i = j;
    }
    let u = member_rank_sum - (n_m * (n_m + 1)) as f64 / 2.0;
    Ok(u / (n_m as f64 * n_n as f64))
}

/// How sequences are mapped to MIA scoring units. Desk-scale sequences are
/// short, so one sequence is one unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkRule {
    SequencePerChunk,
}

/// Min-K% sweep configuration. Members come from the forget set, non-members
/// from the approximate set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiaConfig {
    pub k_percents: Vec<f64>,
    pub chunking: ChunkRule,
}

impl Default for MiaConfig {
    fn default() -> Self {
        MiaConfig {
            k_percents: (1..=10).map(|i| 10.0 * i as f64).collect(),
            chunking: ChunkRule::SequencePerChunk,
        }
    }
}

impl MiaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_percents.is_empty() {
            return Err(Error::InvalidConfig("MIA sweep needs at least one k".into()));
        }
        if let Some(&bad) = self.k_percents.iter().find(|&&k| !(k > 0.0 && k <= 100.0)) {
            return Err(Error::InvalidConfig(format!("k percent {bad} must lie in (0, 100]")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KAuc {
    pub k: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiaSweep {
    pub per_k: Vec<KAuc>,
    pub best_k: f64,
    pub best_auc: f64,
}

/// Sweep Min-K% over the configured percentages and keep the most
/// discriminative one, as the attack would.
pub fn mia_auc_sweep(
    model: &ModelParams,
    members: &[Sequence],
    non_members: &[Sequence],
    cfg: &MiaConfig,
) -> Result<MiaSweep> {
    cfg.validate()?;
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::EmptyData);
    }
    let member_lp: Vec<Vec<f64>> = members.iter().map(|s| token_log_probs(model, s)).collect::<Result<_>>()?;
    let non_lp: Vec<Vec<f64>> = non_members.iter().map(|s| token_log_probs(model, s)).collect::<Result<_>>()?;

    let mut per_k = Vec::with_capacity(cfg.k_percents.len());
    let (mut best_k, mut best_auc) = (cfg.k_percents[0], f64::NEG_INFINITY);
    for &k in &cfg.k_percents {
        let m_scores: Vec<f64> = member_lp.iter().map(|lp| min_k_of_scores(lp, k)).collect();
        let n_scores: Vec<f64> = non_lp.iter().map(|lp| min_k_of_scores(lp, k)).collect();
        let a = auc(&m_scores, &n_scores)?;
        per_k.push(KAuc { k, auc: a });
        if a > best_auc {
            best_auc = a;
            best_k = k;
        }
    }
    Ok(MiaSweep {
        per_k,
        best_k,
        best_auc,
    })
}

/// CSV rendering of a per-k sweep table.
pub fn mia_sweep_csv(sweep: &MiaSweep) -> String {
    let mut out = String::from("k_percent,auc\n");
    for row in &sweep.per_k {
        out.push_str(&format!("{},{}\n", row.k, row.auc));
    }
    out
}

/// The approximate-retraining target: the vanilla model's performance on
/// unseen same-domain data stands in for the retrained model's performance
/// on the forget set.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RetrainTarget {
    pub perplexity: f64,
    pub accuracy: f64,
}

pub fn approx_retrain_target(vanilla: &ModelParams, approx: &[Sequence]) -> Result<RetrainTarget> {
    Ok(RetrainTarget {
        perplexity: perplexity(vanilla, approx)?,
        accuracy: next_token_accuracy(vanilla, approx)?,
    })
}

/// Renyi divergence of order `alpha` between two distributions over the same
/// support. `q` is floored at 1e-12; order 1 is rejected (that limit is KL).
pub fn renyi_divergence(p: &[f64], q: &[f64], alpha: f64) -> Result<f64> {
    if alpha == 1.0 {
        return Err(Error::RenyiAlphaOne);
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::RenyiAlphaInvalid(alpha));
    }
    if p.len() != q.len() {
        return Err(Error::InvalidConfig(format!(
            "distributions have different supports: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            total += pi.powf(alpha) * qi.max(PROB_FLOOR).powf(1.0 - alpha);
        }
    }
    Ok((total.ln() / (alpha - 1.0)).max(0.0))
}

/// KL(p || q) with q floored at 1e-12; the alpha -> 1 limit of the above.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum()
}

/// A single forbidden continuation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForbiddenPair {
    pub prefix: Sequence,
    pub token: Token,
}

/// Behavioral regulation to check a model against: type-I compares output
/// distributions against another model, type-II constrains forbidden-output
/// probabilities directly.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BehavioralConstraint {
    TypeI {
        prompts: Vec<Sequence>,
        alpha: f64,
        xi: f64,
    },
    TypeII {
        forbidden: Vec<ForbiddenPair>,
        xi: f64,
    },
}

impl BehavioralConstraint {
    pub fn validate(&self) -> Result<()> {
        match self {
            BehavioralConstraint::TypeI { prompts, alpha, xi } => {
                if prompts.is_empty() {
                    return Err(Error::InvalidConfig("type-I constraint needs prompts".into()));
                }
                if *alpha == 1.0 {
                    return Err(Error::RenyiAlphaOne);
                }
                if !(*alpha > 0.0) {
                    return Err(Error::RenyiAlphaInvalid(*alpha));
                }
                if !(*xi >= 0.0) {
                    return Err(Error::InvalidConfig("slack xi must be non-negative".into()));
                }
            }
            BehavioralConstraint::TypeII { forbidden, xi } => {
                if forbidden.is_empty() {
                    return Err(Error::InvalidConfig("type-II constraint needs forbidden pairs".into()));
                }
                if !(*xi > 0.0 && *xi < 1.0) {
                    return Err(Error::InvalidConfig(format!("type-II slack {xi} must lie in (0, 1)")));
                }
            }
        }
        Ok(())
    }
}

/// Type-I behavioral measure: the worst symmetrized Renyi divergence between
/// two models' next-token distributions over every position of the prompt
/// set (the tractable restriction of the sup over all input-output pairs).
pub fn type1_measure(a: &ModelParams, b: &ModelParams, prompts: &[Sequence], alpha: f64) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut worst = 0.0f64;
    for prompt in prompts {
        if prompt.is_empty() {
            continue;
        }
        let rows_a = prefix_distributions(a, prompt)?;
        let rows_b = prefix_distributions(b, prompt)?;
        for (pa, pb) in rows_a.iter().zip(&rows_b) {
            let d = renyi_divergence(pa, pb, alpha)?.max(renyi_divergence(pb, pa, alpha)?);
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

/// Type-II violation: the largest probability the model assigns to any
/// forbidden (prefix, token) pair. The constraint is satisfied iff the
/// returned value is at most its xi.
pub fn type2_violation(model: &ModelParams, constraint: &BehavioralConstraint) -> Result<f64> {
    let forbidden = match constraint {
        BehavioralConstraint::TypeII { forbidden, .. } => forbidden,
        BehavioralConstraint::TypeI { .. } => {
            return Err(Error::InvalidConfig(
                "type2_violation requires a type-II constraint".into(),
            ))
        }
    };
    let mut sup = 0.0f64;
    for pair in forbidden {
        let dist = crate::lm::next_token_distribution(model, &pair.prefix)?;
        let p = *dist.get(pair.token).ok_or(Error::OutOfVocab {
            token: pair.token,
            vocab: dist.len(),
        })?;
        sup = sup.max(p);
    }
    Ok(sup)
}

// ---------------------------------------------------------------------------
// Metrics report
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BehavioralReport {
    /// Worst symmetrized Renyi divergence to the retrained model.
    pub type1_renyi: Option<f64>,
    /// Sup probability over the configured forbidden pairs.
    pub type2_sup_prob: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub role: Role,
    pub config_hash: String,
    pub seed: u64,
}

/// The full evaluation of one model. Construction enforces the report
/// invariants (accuracies and AUCs in [0,1], perplexities at least 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provenance: Provenance,
    pub splits: BTreeMap<String, SplitMetrics>,
    pub mia: Option<MiaSweep>,
    pub behavioral: BehavioralReport,
}

impl MetricsReport {
    pub fn new(
        provenance: Provenance,
        splits: BTreeMap<String, SplitMetrics>,
        mia: Option<MiaSweep>,
        behavioral: BehavioralReport,
    ) -> Result<Self> {
        let report = MetricsReport {
            provenance,
            splits,
            mia,
            behavioral,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in &self.splits {
            if !(0.0..=1.0).contains(&m.accuracy) {
                return Err(Error::InvalidReport(format!("{name} accuracy {} outside [0,1]", m.accuracy)));
            }
            if !(m.perplexity >= 1.0) || !m.perplexity.is_finite() {
                return Err(Error::InvalidReport(format!(
                    "{name} perplexity {} must be finite and at least 1",
                    m.perplexity
                )));
            }
        }
        if let Some(mia) = &self.mia {
            for row in &mia.per_k {
                if !(0.0..=1.0).contains(&row.auc) {
                    return Err(Error::InvalidReport(format!("AUC {} outside [0,1]", row.auc)));
                }
            }
            if !(0.0..=1.0).contains(&mia.best_auc) {
                return Err(Error::InvalidReport(format!("best AUC {} outside [0,1]", mia.best_auc)));
            }
        }
        if let Some(t2) = self.behavioral.type2_sup_prob {
            if !(0.0..=1.0).contains(&t2) {
                return Err(Error::InvalidReport(format!("type-II sup probability {t2} outside [0,1]")));
            }
        }
        if let Some(t1) = self.behavioral.type1_renyi {
            if t1 < 0.0 {
                return Err(Error::InvalidReport(format!("type-I measure {t1} negative")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::sequence_nll;

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let m = ModelParams::new_bigram(16).unwrap();
        let data: Vec<Sequence> = vec![vec![0, 3, 7, 11, 2], vec![5, 5, 5]];
        let ppl = perplexity(&m, &data).unwrap();
        assert!((ppl - 16.0).abs() < 1e-9);
    }

    #[test]
    fn near_perfect_model_perplexity_is_one() {
        let mut m = ModelParams::new_bigram(4).unwrap();
        let w = m.param_mut("w").unwrap();
        for c in 0..4 {
            w.data[c * 4 + (c + 1) % 4] = 60.0;
        }
        let data: Vec<Sequence> = vec![vec![0, 1, 2, 3, 0]];
        let ppl = perplexity(&m, &data).unwrap();
        assert!((ppl - 1.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_matches_sequence_nll_composition() {
        let m = ModelParams::new_decoder(crate::lm::DecoderConfig::desk_default(8), 3).unwrap();
        let data: Vec<Sequence> = vec![vec![0, 3, 1, 7, 7, 2], vec![4, 4, 0, 5]];
        let ppl = perplexity(&m, &data).unwrap();
        let mut total = 0.0;
        let mut pos = 0usize;
        for seq in &data {
            total += sequence_nll(&m, seq).unwrap();
            pos += seq.len() - 1;
        }
        assert!((ppl - (total / pos as f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn memorized_deterministic_corpus_has_accuracy_one() {
        let mut m = ModelParams::new_bigram(3).unwrap();
        let w = m.param_mut("w").unwrap();
        for c in 0..3 {
            w.data[c * 3 + (c + 1) % 3] = 40.0;
        }
        let data: Vec<Sequence> = vec![vec![0, 1, 2, 0, 1, 2, 0]];
        assert_eq!(next_token_accuracy(&m, &data).unwrap(), 1.0);
    }

    #[test]
    fn uniform_model_accuracy_matches_binomial_expectation() {
        // Uniform model always argmaxes to token 0 (lowest-id tie break), so
        // accuracy equals the empirical frequency of 0 among next tokens.
        let m = ModelParams::new_bigram(4).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1234);
        let data: Vec<Sequence> = (0..50)
            .map(|_| (0..41).map(|_| rng.gen_range(0..4)).collect())
            .collect();
        let acc = next_token_accuracy(&m, &data).unwrap();
        let n = 50.0 * 40.0;
        let zero_freq = data
            .iter()
            .flat_map(|s| &s[1..])
            .filter(|&&t| t == 0)
            .count() as f64
            / n;
        assert_eq!(acc, zero_freq);
        // 3-sigma binomial band around 1/4.
        let sigma = (0.25 * 0.75 / n).sqrt();
        assert!((acc - 0.25).abs() < 3.0 * sigma + 1e-12, "accuracy {acc}");
    }

    #[test]
    fn length_one_sequences_contribute_no_positions() {
        let m = ModelParams::new_bigram(3).unwrap();
        let data: Vec<Sequence> = vec![vec![2], vec![0, 0]];
        // Only the second sequence counts.
        let acc = next_token_accuracy(&m, &data).unwrap();
        assert_eq!(acc, 1.0); // uniform ties break to 0, truth is 0
    }

    #[test]
    fn min_k_hand_cases() {
        assert_eq!(min_k_of_scores(&[-3.0, -3.0, -3.0], 30.0), -3.0);
        assert_eq!(min_k_of_scores(&[-1.0, -5.0, -2.0, -9.0], 50.0), -7.0);
        // k = 100 is the plain mean.
        let lp = [-1.0, -5.0, -2.0, -9.0];
        let mean = lp.iter().sum::<f64>() / 4.0;
        assert_eq!(min_k_of_scores(&lp, 100.0), mean);
    }

    #[test]
    fn min_k_full_set_equals_negative_nll_over_t() {
        let m = ModelParams::new_decoder(crate::lm::DecoderConfig::desk_default(6), 9).unwrap();
        let seq: Sequence = vec![0, 5, 2, 2, 4, 1];
        let score = min_k_score(&m, &seq, 100.0).unwrap();
        let nll = sequence_nll(&m, &seq).unwrap();
        assert!((score + nll / 5.0).abs() < 1e-10);
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        let same = [0.4, 0.1, 0.9];
        assert_eq!(auc(&same, &same).unwrap(), 0.5);
        // Brute force over 4 pairs gives 1/4.
        assert_eq!(auc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.25);
    }

    #[test]
    fn auc_self_comparison_is_half_for_any_list() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for trial in 0..50 {
            let n = 1 + (trial % 9);
            let mut scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..5) as f64) * 0.5).collect();
            scores[0] = scores[n.min(scores.len()) - 1]; // force some ties
            assert_eq!(auc(&scores, &scores).unwrap(), 0.5);
        }
    }

    #[test]
    fn auc_matches_pairwise_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(21);
        for _ in 0..40 {
            let members: Vec<f64> = (0..6).map(|_| rng.gen_range(0..8) as f64).collect();
            let non: Vec<f64> = (0..9).map(|_| rng.gen_range(0..8) as f64).collect();
            let mut wins = 0.0;
            for &m in &members {
                for &n in &non {
                    if m > n {
                        wins += 1.0;
                    } else if m == n {
                        wins += 0.5;
                    }
                }
            }
            let brute = wins / (members.len() * non.len()) as f64;
            assert!((auc(&members, &non).unwrap() - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn mia_sweep_singleton_picks_that_k() {
        let m = ModelParams::new_bigram(4).unwrap();
        let members: Vec<Sequence> = vec![vec![0, 1, 2], vec![1, 2, 3]];
        let non: Vec<Sequence> = vec![vec![3, 2, 1], vec![2, 0, 0]];
        let cfg = MiaConfig {
            k_percents: vec![40.0],
            chunking: ChunkRule::SequencePerChunk,
        };
        let sweep = mia_auc_sweep(&m, &members, &non, &cfg).unwrap();
        assert_eq!(sweep.best_k, 40.0);
        assert_eq!(sweep.per_k.len(), 1);
    }

    #[test]
    fn approx_target_on_forget_set_matches_forget_metrics() {
        // Degenerate A = U: the target must equal the vanilla forget metrics.
        let m = ModelParams::new_decoder(crate::lm::DecoderConfig::desk_default(5), 2).unwrap();
        let u: Vec<Sequence> = vec![vec![0, 1, 2, 3, 4], vec![4, 3, 2, 1, 0]];
        let target = approx_retrain_target(&m, &u).unwrap();
        assert_eq!(target.perplexity, perplexity(&m, &u).unwrap());
        assert_eq!(target.accuracy, next_token_accuracy(&m, &u).unwrap());
    }

    #[test]
    fn renyi_hand_cases() {
        let p = [0.3, 0.45, 0.25];
        assert!(renyi_divergence(&p, &p, 2.0).unwrap() <= 1e-12);
        // alpha = 2, p = (1, 0), q = (1/2, 1/2): ln sum p^2/q = ln 2.
        let v = renyi_divergence(&[1.0, 0.0], &[0.5, 0.5], 2.0).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
        assert!(matches!(renyi_divergence(&p, &p, 1.0), Err(Error::RenyiAlphaOne)));
        assert!(matches!(renyi_divergence(&p, &p, -0.5), Err(Error::RenyiAlphaInvalid(_))));
    }

    #[test]
    fn renyi_is_monotone_in_alpha() {
        let p = [0.6, 0.3, 0.1];
        let q = [0.2, 0.5, 0.3];
        let grid = [0.25, 0.5, 0.9, 1.5, 2.0, 4.0, 8.0];
        let vals: Vec<f64> = grid.iter().map(|&a| renyi_divergence(&p, &q, a).unwrap()).collect();
        for w in vals.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{vals:?}");
        }
        for v in vals {
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn type1_is_zero_for_identical_models_and_symmetric() {
        let a = ModelParams::new_decoder(crate::lm::DecoderConfig::desk_default(6), 4).unwrap();
        let b = ModelParams::new_decoder(crate::lm::DecoderConfig::desk_default(6), 5).unwrap();
        let prompts: Vec<Sequence> = vec![vec![0, 1, 2, 3], vec![5, 4, 3]];
        assert!(type1_measure(&a, &a, &prompts, 2.0).unwrap() <= 1e-12);
        let ab = type1_measure(&a, &b, &prompts, 2.0).unwrap();
        let ba = type1_measure(&b, &a, &prompts, 2.0).unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
    }

    #[test]
    fn type2_reads_forbidden_probability() {
        let mut m = ModelParams::new_bigram(3).unwrap();
        // P(. | 0) = softmax(ln 3, ln 6, ln 1) = (0.3, 0.6, 0.1).
        let w = m.param_mut("w").unwrap();
        w.data[0] = 3.0f64.ln();
        w.data[1] = 6.0f64.ln();
        w.data[2] = 1.0f64.ln();
        let c = BehavioralConstraint::TypeII {
            forbidden: vec![ForbiddenPair {
                prefix: vec![0],
                token: 0,
            }],
            xi: 0.1,
        };
        let v = type2_violation(&m, &c).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        assert!(v > 0.1); // violated
    }

    #[test]
    fn type2_hard_masked_token_reads_zero() {
        let mut m = ModelParams::new_bigram(3).unwrap();
        // Logit -1e9 underflows to probability exactly 0 after softmax.
        m.param_mut("w").unwrap().data[2] = -1e9;
        let c = BehavioralConstraint::TypeII {
            forbidden: vec![ForbiddenPair {
                prefix: vec![0],
                token: 2,
            }],
            xi: 0.01,
        };
        assert_eq!(type2_violation(&m, &c).unwrap(), 0.0);
    }

    #[test]
    fn report_construction_enforces_invariants() {
        let prov = Provenance {
            role: Role::Vanilla,
            config_hash: "abc".into(),
            seed: 1,
        };
        let mut splits = BTreeMap::new();
        splits.insert(
            "forget".to_string(),
            SplitMetrics {
                accuracy: 1.4,
                perplexity: 3.0,
            },
        );
        assert!(MetricsReport::new(prov.clone(), splits, None, BehavioralReport::default()).is_err());

        let mut ok = BTreeMap::new();
        ok.insert(
            "forget".to_string(),
            SplitMetrics {
                accuracy: 0.5,
                perplexity: 3.0,
            },
        );
        assert!(MetricsReport::new(prov, ok, None, BehavioralReport::default()).is_ok());
    }

    #[test]
    fn constraint_validation() {
        let bad = BehavioralConstraint::TypeII {
            forbidden: vec![],
            xi: 0.1,
        };
        assert!(bad.validate().is_err());
        let bad_xi = BehavioralConstraint::TypeII {
            forbidden: vec![ForbiddenPair {
                prefix: vec![0],
                token: 1,
            }],
            xi: 1.5,
        };
        assert!(bad_xi.validate().is_err());
    }
}
