//! Experiment orchestration: a TOML-config-driven pipeline that, per seed,
//! generates a corpus, trains a vanilla model, retrains the oracle on the
//! retain set, runs every configured unlearning method to its
//! approximate-retraining target, and writes checkpoints, traces, metrics
//! JSON and a run manifest. Also the learning-rate guideline search and the
//! hyperparameter sweep runner.
//!
//! Everything is seeded; identical configs produce byte-identical reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    self, generate, make_splits, mix_seed, CorpusSplits, GeneratorKind, GeneratorSpec, InitialDist,
    MarkovChainSpec, SplitSpec, TemplateGrammarSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    approx_retrain_target, mia_auc_sweep, next_token_accuracy, perplexity, type1_measure,
    type2_violation, BehavioralConstraint, BehavioralReport, ForbiddenPair, MetricsReport, MiaConfig,
    Provenance, RetrainTarget, SplitMetrics,
};
use crate::lm::{
    load_checkpoint, next_token_distribution, save_checkpoint, train, Arch, DecoderConfig,
    ModelParams, OptimizerKind, Role, TrainConfig,
};
use crate::unlearn::{
    retrain_oracle, run_targeted_unlearning, run_unlearning, MethodKind, MethodSpec, StopRule,
    UnlearnRun,
};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

// ---------------------------------------------------------------------------
// Configuration schema (TOML)
// ---------------------------------------------------------------------------

/// Corpus generator section.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_sequences: usize,
    pub sequence_length: usize,
    pub seed: u64,
    pub kind: GenKindConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum GenKindConfig {
    /// Explicit transition matrix.
    Markov {
        order: usize,
        vocab: usize,
        transitions: Vec<Vec<f64>>,
        initial: Option<InitialDist>,
    },
    /// Deterministic random chain built from a matrix seed.
    StructuredMarkov {
        vocab: usize,
        matrix_seed: u64,
        spread: f64,
        floor: f64,
    },
    TemplateGrammar {
        templates: Vec<String>,
        fillers: BTreeMap<String, Vec<String>>,
    },
}

impl GeneratorConfig {
    pub fn lower(&self) -> Result<GeneratorSpec> {
        let kind = match &self.kind {
            GenKindConfig::Markov {
                order,
                vocab,
                transitions,
                initial,
            } => {
                let mut chain = MarkovChainSpec::new(*order, *vocab, transitions.clone())?;
                if let Some(init) = initial {
                    chain.initial = *init;
                }
                GeneratorKind::MarkovChain(chain)
            }
            GenKindConfig::StructuredMarkov {
                vocab,
                matrix_seed,
                spread,
                floor,
            } => GeneratorKind::MarkovChain(MarkovChainSpec::structured(*vocab, *matrix_seed, *spread, *floor)),
            GenKindConfig::TemplateGrammar { templates, fillers } => {
                GeneratorKind::TemplateGrammar(TemplateGrammarSpec {
                    templates: templates.clone(),
                    fillers: fillers.clone(),
                })
            }
        };
        let spec = GeneratorSpec {
            kind,
            num_sequences: self.num_sequences,
            sequence_length: self.sequence_length,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum ModelConfig {
    TinyDecoder {
        layers: usize,
        dim: usize,
        heads: usize,
        context: usize,
        mlp_hidden: usize,
    },
    Bigram,
}

impl ModelConfig {
    pub fn to_arch(&self, vocab: usize) -> Result<Arch> {
        match self {
            ModelConfig::TinyDecoder {
                layers,
                dim,
                heads,
                context,
                mlp_hidden,
            } => {
                let cfg = DecoderConfig {
                    vocab,
                    layers: *layers,
                    dim: *dim,
                    heads: *heads,
                    context: *context,
                    mlp_hidden: *mlp_hidden,
                };
                cfg.validate()?;
                Ok(Arch::TinyDecoder(cfg))
            }
            ModelConfig::Bigram => Ok(Arch::Bigram { vocab }),
        }
    }
}

/// Unlearning-run section shared by every method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub lr: f64,
    pub steps: usize,
    pub batches: usize,
    pub optimizer: OptimizerKind,
    pub max_grad_norm: Option<f64>,
    /// Relative tolerance on the approximate-retraining perplexity target.
    pub stop_rel_tol: f64,
}

impl UnlearnConfig {
    pub fn to_run(&self, method: MethodSpec, stop: StopRule, seed: u64) -> UnlearnRun {
        UnlearnRun {
            method,
            lr: self.lr,
            steps: self.steps,
            batches: self.batches,
            stop,
            optimizer: self.optimizer,
            max_grad_norm: self.max_grad_norm,
            seed,
        }
    }
}

/// Behavioral-measure section: type-I order and the targeted type-II run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BehavioralConfig {
    /// Renyi order for the type-I measure.
    pub alpha: f64,
    /// Number of forbidden pairs picked from the forget set.
    pub pairs: usize,
    /// Prefix length of each forbidden pair.
    pub prefix_len: usize,
    /// Type-II slack.
    pub xi: f64,
    pub targeted_lr: f64,
    pub targeted_steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub unlearn: UnlearnConfig,
    pub methods: Vec<MethodKind>,
    pub mia: MiaConfig,
    pub behavioral: Option<BehavioralConfig>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        self.generator.lower()?;
        self.train.validate()?;
        self.mia.validate()?;
        if let Some(sweep) = &self.sweep {
            sweep.validate()?;
        }
        if let Some(b) = &self.behavioral {
            if b.pairs == 0 || b.prefix_len == 0 {
                return Err(Error::InvalidConfig("behavioral pairs and prefix_len must be positive".into()));
            }
            if !(b.xi > 0.0 && b.xi < 1.0) {
                return Err(Error::InvalidConfig(format!("type-II slack {} must lie in (0,1)", b.xi)));
            }
        }
        Ok(())
    }

    /// Stable hash of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

impl Default for ExperimentConfig {
    /// The desk-default experiment: a 16-token structured Markov corpus of
    /// 200 sequences, the 2-layer width-32 decoder, and all seven methods
    /// run to the approximate-retraining target over five seeds.
    fn default() -> Self {
        ExperimentConfig {
            generator: GeneratorConfig {
                num_sequences: 200,
                sequence_length: 33,
                seed: 11,
                kind: GenKindConfig::StructuredMarkov {
                    vocab: 16,
                    matrix_seed: 2024,
                    spread: 1.6,
                    floor: 0.006,
                },
            },
            split: SplitSpec {
                forget_fraction: 0.05,
                retain_sample_size: 10,
                approx_size: 50,
                general_size: 40,
                seed: 17,
            },
            model: ModelConfig::TinyDecoder {
                layers: 2,
                dim: 32,
                heads: 2,
                context: 64,
                mlp_hidden: 64,
            },
            train: TrainConfig {
                lr: 3e-3,
                batch_size: 10,
                epochs: 40,
                optimizer: OptimizerKind::adam_default(),
                seed: 7,
                max_grad_norm: Some(5.0),
            },
            unlearn: UnlearnConfig {
                lr: 1e-3,
                steps: 64,
                batches: 4,
                optimizer: OptimizerKind::adam_default(),
                max_grad_norm: Some(1.0),
                stop_rel_tol: 0.02,
            },
            methods: MethodKind::ALL.to_vec(),
            mia: MiaConfig::default(),
            behavioral: Some(BehavioralConfig {
                alpha: 2.0,
                pairs: 5,
                prefix_len: 8,
                xi: 1e-2,
                targeted_lr: 5e-4,
                targeted_steps: 64,
            }),
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: None,
            sweep: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Seed preparation
// ---------------------------------------------------------------------------

const CORPUS_STREAM: u64 = 0x10;
const SPLIT_STREAM: u64 = 0x20;
const TRAIN_STREAM: u64 = 0x30;
const METHOD_STREAM: u64 = 0x40;

/// Corpus, splits and models for one experiment seed.
#[derive(Clone, Debug)]
pub struct PreparedSeed {
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub splits: CorpusSplits,
    pub vanilla: ModelParams,
    pub retrained: Option<ModelParams>,
    pub target: Option<RetrainTarget>,
}

/// Per-seed generator spec: the experiment seed perturbs the corpus stream.
pub fn seed_generator(cfg: &ExperimentConfig, seed: u64) -> Result<GeneratorSpec> {
    Ok(cfg.generator.lower()?.with_seed(mix_seed(cfg.generator.seed, mix_seed(CORPUS_STREAM, seed))))
}

pub fn seed_splits(cfg: &ExperimentConfig, seed: u64) -> Result<(GeneratorSpec, CorpusSplits)> {
    let generator = seed_generator(cfg, seed)?;
    let corpus = generate(&generator)?;
    let split_spec = SplitSpec {
        seed: mix_seed(cfg.split.seed, mix_seed(SPLIT_STREAM, seed)),
        ..cfg.split.clone()
    };
    let splits = make_splits(&corpus, &split_spec, &generator)?;
    Ok((generator, splits))
}

fn seed_train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: mix_seed(cfg.train.seed, mix_seed(TRAIN_STREAM, seed)),
        ..cfg.train.clone()
    }
}

/// Generate the corpus, train the vanilla model and (optionally) the
/// retraining oracle for one seed.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64, with_oracle: bool) -> Result<PreparedSeed> {
    let (generator, splits) = seed_splits(cfg, seed)?;
    let arch = cfg.model.to_arch(generator.vocab())?;
    let tcfg = seed_train_config(cfg, seed);
    let fresh = match &arch {
        Arch::TinyDecoder(dc) => ModelParams::new_decoder(dc.clone(), tcfg.seed)?,
        Arch::Bigram { vocab } => ModelParams::new_bigram(*vocab)?,
    };
    let vanilla = train(&fresh, &splits.train, &tcfg)?;
    let (retrained, target) = if with_oracle {
        let retrained = retrain_oracle(&arch, &splits, &tcfg)?;
        let target = approx_retrain_target(&vanilla, &splits.approx)?;
        (Some(retrained), Some(target))
    } else {
        (None, None)
    };
    Ok(PreparedSeed {
        seed,
        generator,
        splits,
        vanilla,
        retrained,
        target,
    })
}

/// Forbidden pairs for the targeted type-II run: the `pairs` forget-set
/// continuations to which the vanilla model assigns the highest probability.
pub fn pick_forbidden_pairs(
    vanilla: &ModelParams,
    splits: &CorpusSplits,
    behavioral: &BehavioralConfig,
) -> Result<Vec<ForbiddenPair>> {
    let mut scored: Vec<(f64, usize, ForbiddenPair)> = Vec::new();
    for (i, seq) in splits.forget.iter().enumerate() {
        if seq.len() <= behavioral.prefix_len {
            continue;
        }
        let prefix: Vec<usize> = seq[..behavioral.prefix_len].to_vec();
        let token = seq[behavioral.prefix_len];
        let p = next_token_distribution(vanilla, &prefix)?[token];
        scored.push((p, i, ForbiddenPair { prefix, token }));
    }
    if scored.len() < behavioral.pairs {
        return Err(Error::InvalidConfig(format!(
            "forget set yields {} candidate pairs, need {}",
            scored.len(),
            behavioral.pairs
        )));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(behavioral.pairs).map(|(_, _, p)| p).collect())
}

/// Type-I prompt set: every forget sequence plus an equal number of general
/// sequences.
pub fn type1_prompts(splits: &CorpusSplits) -> Vec<Vec<usize>> {
    let mut prompts = splits.forget.clone();
    prompts.extend(splits.general.iter().take(splits.forget.len()).cloned());
    prompts
}

/// Evaluate one model into a [`MetricsReport`].
pub fn evaluate_model(
    model: &ModelParams,
    splits: &CorpusSplits,
    mia: &MiaConfig,
    retrained: Option<&ModelParams>,
    constraint: Option<&BehavioralConstraint>,
    alpha: f64,
    provenance: Provenance,
) -> Result<MetricsReport> {
    let mut split_metrics = BTreeMap::new();
    for (name, data) in [
        ("forget", &splits.forget),
        ("retain", &splits.retain),
        ("general", &splits.general),
        ("approximate", &splits.approx),
    ] {
        if data.is_empty() {
            continue;
        }
        split_metrics.insert(
            name.to_string(),
            SplitMetrics {
                accuracy: next_token_accuracy(model, data)?,
                perplexity: perplexity(model, data)?,
            },
        );
    }
    let mia_sweep = mia_auc_sweep(model, &splits.forget, &splits.approx, mia)?;
    let type1_renyi = match retrained {
        Some(r) => Some(type1_measure(model, r, &type1_prompts(splits), alpha)?),
        None => None,
    };
    let type2_sup_prob = match constraint {
        Some(c) => Some(type2_violation(model, c)?),
        None => None,
    };
    MetricsReport::new(
        provenance,
        split_metrics,
        Some(mia_sweep),
        BehavioralReport {
            type1_renyi,
            type2_sup_prob,
        },
    )
}

// ---------------------------------------------------------------------------
// Full experiment runner
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "error")]
pub enum StageStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageStatus>,
    pub vanilla_checkpoint_sha256: Option<String>,
    /// The stored vanilla checkpoint hash is unchanged by unlearning runs.
    pub vanilla_isolation_ok: Option<bool>,
}

impl RunManifest {
    fn record<T>(&mut self, name: &str, result: Result<T>) -> Option<T> {
        match result {
            Ok(v) => {
                self.stages.insert(name.to_string(), StageStatus::Ok);
                Some(v)
            }
            Err(e) => {
                self.stages.insert(name.to_string(), StageStatus::Failed(e.to_string()));
                None
            }
        }
    }

    pub fn all_ok(&self) -> bool {
        self.stages.values().all(|s| matches!(s, StageStatus::Ok)) && self.vanilla_isolation_ok != Some(false)
    }
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub reports: Vec<(u64, String, MetricsReport)>,
    pub manifests: Vec<RunManifest>,
}

impl ExperimentOutcome {
    /// True when every stage succeeded and every emitted report passes its
    /// own invariants; the CLI exit code keys off this.
    pub fn all_ok(&self) -> bool {
        self.manifests.iter().all(RunManifest::all_ok)
            && self.reports.iter().all(|(_, _, r)| r.validate().is_ok())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Run the full pipeline for every seed and method, writing artifacts under
/// `out`. Stage failures are recorded in the manifest and do not abort the
/// other seeds.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.snapshot.toml"), cfg.to_toml_string())?;
    let config_hash = cfg.hash();

    let mut outcome = ExperimentOutcome {
        reports: Vec::new(),
        manifests: Vec::new(),
    };

    for &seed in &cfg.seeds {
        let mut manifest = RunManifest {
            config_hash: config_hash.clone(),
            seed,
            stages: BTreeMap::new(),
            vanilla_checkpoint_sha256: None,
            vanilla_isolation_ok: None,
        };
        let seed_dir = out.join(format!("seed_{seed:04}"));
        let ckpt_dir = seed_dir.join("checkpoints");
        let metrics_dir = seed_dir.join("metrics");
        let traces_dir = seed_dir.join("traces");
        fs::create_dir_all(&ckpt_dir)?;
        fs::create_dir_all(&metrics_dir)?;
        fs::create_dir_all(&traces_dir)?;

        // Stage: corpus + splits.
        let prepared = manifest.record("prepare", prepare_seed(cfg, seed, true).and_then(|p| {
            let tok = p.generator.tokenizer()?;
            corpus::save_corpus(&seed_dir.join("corpus.txt"), &p.splits.train, &tok)?;
            corpus::save_manifest(&seed_dir.join("splits.json"), &p.splits.manifest)?;
            Ok(p)
        }));
        let Some(prepared) = prepared else {
            outcome.manifests.push(manifest.clone());
            write_json(&seed_dir.join("manifest.json"), &manifest)?;
            continue;
        };
        let vanilla = &prepared.vanilla;
        let retrained = prepared.retrained.as_ref().expect("oracle prepared");
        let target = prepared.target.expect("target prepared");

        let vanilla_path = ckpt_dir.join("vanilla.ulab");
        save_checkpoint(vanilla, &vanilla_path)?;
        manifest.vanilla_checkpoint_sha256 = Some(sha256_hex(&fs::read(&vanilla_path)?));
        save_checkpoint(retrained, &ckpt_dir.join("retrained.ulab"))?;
        write_json(&seed_dir.join("target.json"), &target)?;

        // Behavioral constraint derived from the vanilla model.
        let constraint = match &cfg.behavioral {
            Some(b) => manifest
                .record(
                    "forbidden-pairs",
                    pick_forbidden_pairs(vanilla, &prepared.splits, b).map(|forbidden| {
                        BehavioralConstraint::TypeII {
                            forbidden,
                            xi: b.xi,
                        }
                    }),
                )
                .map(|c| (c, b.clone())),
            None => None,
        };
        let alpha = cfg.behavioral.as_ref().map_or(2.0, |b| b.alpha);

        // Reports for the vanilla and retrained models.
        for (name, model, vs) in [
            ("vanilla", vanilla, Some(retrained)),
            ("retrained", retrained, None),
        ] {
            let report = manifest.record(
                &format!("report:{name}"),
                evaluate_model(
                    model,
                    &prepared.splits,
                    &cfg.mia,
                    vs,
                    constraint.as_ref().map(|(c, _)| c),
                    alpha,
                    Provenance {
                        role: model.role,
                        config_hash: config_hash.clone(),
                        seed,
                    },
                )
                .and_then(|r| {
                    write_json(&metrics_dir.join(format!("{name}.json")), &r)?;
                    Ok(r)
                }),
            );
            if let Some(r) = report {
                outcome.reports.push((seed, name.to_string(), r));
            }
        }

        // Unlearning runs, one per configured method.
        for (mi, &kind) in cfg.methods.iter().enumerate() {
            let run = cfg.unlearn.to_run(
                MethodSpec::from_kind(kind),
                StopRule::ReachForgetPpl {
                    target: target.perplexity,
                    rel_tol: cfg.unlearn.stop_rel_tol,
                },
                mix_seed(seed, mix_seed(METHOD_STREAM, mi as u64)),
            );
            let name = kind.name();
            let produced = manifest.record(
                &format!("method:{name}"),
                run_unlearning(vanilla, &prepared.splits, &run).and_then(|(model, trace)| {
                    save_checkpoint(&model, &ckpt_dir.join(format!("{name}.ulab")))?;
                    write_json(&traces_dir.join(format!("{name}.json")), &trace)?;
                    Ok((model, trace))
                }),
            );
            if let Some((model, _trace)) = produced {
                let report = manifest.record(
                    &format!("report:{name}"),
                    evaluate_model(
                        &model,
                        &prepared.splits,
                        &cfg.mia,
                        Some(retrained),
                        constraint.as_ref().map(|(c, _)| c),
                        alpha,
                        Provenance {
                            role: Role::Unlearned,
                            config_hash: config_hash.clone(),
                            seed,
                        },
                    )
                    .and_then(|r| {
                        write_json(&metrics_dir.join(format!("{name}.json")), &r)?;
                        Ok(r)
                    }),
                );
                if let Some(r) = report {
                    outcome.reports.push((seed, name.to_string(), r));
                }
            }
        }

        // Targeted type-II run.
        if let Some((c, bcfg)) = &constraint {
            let produced = manifest.record(
                "method:targeted-ga",
                run_targeted_unlearning(
                    vanilla,
                    c,
                    bcfg.targeted_lr,
                    bcfg.targeted_steps,
                    cfg.unlearn.optimizer,
                    cfg.unlearn.max_grad_norm,
                )
                .and_then(|(model, trace)| {
                    save_checkpoint(&model, &ckpt_dir.join("targeted-ga.ulab"))?;
                    write_json(&traces_dir.join("targeted-ga.json"), &trace)?;
                    Ok((model, trace))
                }),
            );
            if let Some((model, _)) = produced {
                let report = manifest.record(
                    "report:targeted-ga",
                    evaluate_model(
                        &model,
                        &prepared.splits,
                        &cfg.mia,
                        Some(retrained),
                        Some(c),
                        alpha,
                        Provenance {
                            role: Role::Unlearned,
                            config_hash: config_hash.clone(),
                            seed,
                        },
                    )
                    .and_then(|r| {
                        write_json(&metrics_dir.join("targeted-ga.json"), &r)?;
                        Ok(r)
                    }),
                );
                if let Some(r) = report {
                    outcome.reports.push((seed, "targeted-ga".to_string(), r));
                }
            }
        }

        // Unlearning must not have touched the stored vanilla checkpoint.
        if let Some(before) = &manifest.vanilla_checkpoint_sha256 {
            let after = sha256_hex(&fs::read(&vanilla_path)?);
            manifest.vanilla_isolation_ok = Some(&after == before);
        }

        write_json(&seed_dir.join("manifest.json"), &manifest)?;
        outcome.manifests.push(manifest);
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Learning-rate guideline search
// ---------------------------------------------------------------------------

/// Two-phase search from the hyperparameter guideline: the coarse grid
/// brackets the learning rate where forget perplexity crosses `target`,
/// then 10 evenly spaced rates inside the bracket pick the closest match.
/// `response` maps a learning rate to the resulting forget perplexity
/// (optimization steps held fixed, at 4 in the standard regime).
pub fn lr_guideline_search(
    mut response: impl FnMut(f64) -> Result<f64>,
    coarse_grid: &[f64],
    target: f64,
    rel_tol: f64,
) -> Result<f64> {
    if coarse_grid.is_empty() {
        return Err(Error::InvalidConfig("coarse grid must be non-empty".into()));
    }
    if coarse_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig("coarse grid must be strictly increasing".into()));
    }
    let ppls: Vec<f64> = coarse_grid.iter().map(|&lr| response(lr)).collect::<Result<_>>()?;

    if coarse_grid.len() == 1 {
        if (ppls[0] - target).abs() / target <= rel_tol {
            return Ok(coarse_grid[0]);
        }
        return Err(Error::TargetNotBracketed {
            target,
            lo_lr: coarse_grid[0],
            lo_ppl: ppls[0],
            hi_lr: coarse_grid[0],
            hi_ppl: ppls[0],
        });
    }

    let bracket = ppls
        .windows(2)
        .position(|w| w[0] <= target && target <= w[1]);
    let Some(i) = bracket else {
        return Err(Error::TargetNotBracketed {
            target,
            lo_lr: coarse_grid[0],
            lo_ppl: ppls[0],
            hi_lr: *coarse_grid.last().unwrap(),
            hi_ppl: *ppls.last().unwrap(),
        });
    };

    let (lo, hi) = (coarse_grid[i], coarse_grid[i + 1]);
    let mut best = (coarse_grid[i], (ppls[i] - target).abs());
    if (ppls[i + 1] - target).abs() < best.1 {
        best = (coarse_grid[i + 1], (ppls[i + 1] - target).abs());
    }
    for k in 1..=10 {
        let lr = lo + (hi - lo) * k as f64 / 11.0;
        let ppl = response(lr)?;
        let err = (ppl - target).abs();
        if err < best.1 {
            best = (lr, err);
        }
    }
    Ok(best.0)
}

/// The guideline search over real unlearning runs: 4 fixed optimization
/// steps per evaluation, forget perplexity as the response.
pub fn lr_search_for_method(
    vanilla: &ModelParams,
    splits: &CorpusSplits,
    method: MethodKind,
    ucfg: &UnlearnConfig,
    coarse_grid: &[f64],
    target: f64,
    rel_tol: f64,
) -> Result<f64> {
    lr_guideline_search(
        |lr| {
            let run = UnlearnRun {
                lr,
                steps: 4,
                batches: 4,
                stop: StopRule::FixedSteps,
                ..ucfg.to_run(MethodSpec::from_kind(method), StopRule::FixedSteps, 0)
            };
            let (model, _) = run_unlearning(vanilla, splits, &run)?;
            perplexity(&model, &splits.forget)
        },
        coarse_grid,
        target,
        rel_tol,
    )
}

// ---------------------------------------------------------------------------
// Hyperparameter sweeps
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    LearningRate,
    OptimizationSteps,
}

/// One-dimensional sweep: vary `axis` over `grid` with the counterpart
/// hyperparameter held at `fixed`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub fixed: f64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidConfig("sweep grid must be non-empty".into()));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("sweep grid must be strictly increasing".into()));
        }
        if self.axis == SweepAxis::OptimizationSteps {
            if self.grid.iter().any(|&g| g < 1.0 || g.fract() != 0.0) {
                return Err(Error::InvalidConfig("step grid values must be positive integers".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: MethodKind,
    pub point: f64,
    pub seed: u64,
    pub forget_ppl: f64,
    pub retain_ppl: f64,
    pub general_ppl: f64,
    pub clip_events: usize,
    pub nan_events: usize,
    pub steps_taken: usize,
}

/// Sweep over prepared seeds. One run per (method, grid point, seed); steps
/// always cover the forget set exactly once, in as many batches as steps.
pub fn sweep_runs(
    prepared: &[PreparedSeed],
    methods: &[MethodKind],
    spec: &SweepSpec,
    ucfg: &UnlearnConfig,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for p in prepared {
        for &method in methods {
            for (gi, &point) in spec.grid.iter().enumerate() {
                let (lr, steps) = match spec.axis {
                    SweepAxis::LearningRate => (point, spec.fixed.max(1.0) as usize),
                    SweepAxis::OptimizationSteps => (spec.fixed, point as usize),
                };
                let run = UnlearnRun {
                    method: MethodSpec::from_kind(method),
                    lr,
                    steps,
                    batches: steps,
                    stop: StopRule::FixedSteps,
                    optimizer: ucfg.optimizer,
                    max_grad_norm: ucfg.max_grad_norm,
                    seed: mix_seed(p.seed, gi as u64),
                };
                let (model, trace) = run_unlearning(&p.vanilla, &p.splits, &run)?;
                let finite_or = |ppl: Result<f64>| ppl.map(|v| if v.is_finite() { v } else { f64::MAX });
                rows.push(SweepRow {
                    method,
                    point,
                    seed: p.seed,
                    forget_ppl: finite_or(perplexity(&model, &p.splits.forget))?,
                    retain_ppl: finite_or(perplexity(&model, &p.splits.retain))?,
                    general_ppl: finite_or(perplexity(&model, &p.splits.general))?,
                    clip_events: trace.clip_events,
                    nan_events: trace.nan_events,
                    steps_taken: trace.steps.len(),
                });
            }
        }
    }
    Ok(rows)
}

/// Full sweep pipeline: prepare each seed (corpus + vanilla), run the sweep,
/// and write `sweep.csv` plot data under `out`.
pub fn sweep(cfg: &ExperimentConfig, spec: &SweepSpec, out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    spec.validate()?;
    let prepared: Vec<PreparedSeed> = cfg
        .seeds
        .iter()
        .map(|&s| prepare_seed(cfg, s, false))
        .collect::<Result<_>>()?;
    let rows = sweep_runs(&prepared, &cfg.methods, spec, &cfg.unlearn)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("method,point,seed,forget_ppl,retain_ppl,general_ppl,clip_events,nan_events,steps_taken\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method.name(),
            r.point,
            r.seed,
            r.forget_ppl,
            r.retain_ppl,
            r.general_ppl,
            r.clip_events,
            r.nan_events,
            r.steps_taken
        ));
    }
    out
}

/// Median of a non-empty slice (midpoint average for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Reload a checkpoint and its splits for standalone CLI stages.
pub fn load_model(path: &Path) -> Result<ModelParams> {
    load_checkpoint(path)
}
