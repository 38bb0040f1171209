//! Second temporary calibration probe (removed before release).

use std::time::Instant;

use unlearn_lab::eval::*;
use unlearn_lab::harness::*;
use unlearn_lab::lm::*;
use unlearn_lab::unlearn::*;

fn base_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 12;
    cfg.generator.sequence_length = 65;
    cfg
}

#[test]
#[ignore]
fn targeted_variants() {
    let cfg = base_cfg();
    let prepared: Vec<PreparedSeed> = (1..=3).map(|s| prepare_seed(&cfg, s, false).unwrap()).collect();
    let bcfg = cfg.behavioral.clone().unwrap();

    for (label, opt, lr, steps) in [
        ("adam 1e-4 x256", OptimizerKind::adam_default(), 1e-4, 256usize),
        ("sgd 0.1 x256", OptimizerKind::Sgd, 0.1, 256),
        ("sgd 0.3 x256", OptimizerKind::Sgd, 0.3, 256),
        ("sgd 1.0 x256", OptimizerKind::Sgd, 1.0, 256),
    ] {
        let mut viols = vec![];
        let mut ratios = vec![];
        let mut steps_used = vec![];
        for p in &prepared {
            let pairs = pick_forbidden_pairs(&p.vanilla, &p.splits, &bcfg).unwrap();
            let c = BehavioralConstraint::TypeII { forbidden: pairs, xi: bcfg.xi };
            let g0 = perplexity(&p.vanilla, &p.splits.general).unwrap();
            let (un, trace) = run_targeted_unlearning(&p.vanilla, &c, lr, steps, opt, Some(1.0)).unwrap();
            viols.push(type2_violation(&un, &c).unwrap());
            ratios.push(perplexity(&un, &p.splits.general).unwrap() / g0);
            steps_used.push(trace.steps.len() as f64);
        }
        println!(
            "{label}: median violation {:.4} general ratio {:.3} steps {:.0}",
            median(&viols),
            median(&ratios),
            median(&steps_used)
        );
    }
}

#[test]
#[ignore]
fn targeted_memorized_pairs() {
    // Score candidate pairs by full-prefix vs last-token probability gap
    // (memorization beyond local structure), then suppress those.
    let cfg = base_cfg();
    let bcfg = cfg.behavioral.clone().unwrap();
    for seed in 1..=3u64 {
        let p = prepare_seed(&cfg, seed, false).unwrap();
        let mut scored: Vec<(f64, f64, ForbiddenPair)> = vec![];
        for seq in &p.splits.forget {
            for cut in [bcfg.prefix_len, bcfg.prefix_len + 13, bcfg.prefix_len + 29] {
                if seq.len() <= cut {
                    continue;
                }
                let prefix = seq[..cut].to_vec();
                let token = seq[cut];
                let p_full = next_token_distribution(&p.vanilla, &prefix).unwrap()[token];
                let p_last = next_token_distribution(&p.vanilla, &prefix[cut - 1..]).unwrap()[token];
                scored.push((p_full - p_last, p_full, ForbiddenPair { prefix, token }));
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let pairs: Vec<ForbiddenPair> = scored.iter().take(5).map(|(_, _, x)| x.clone()).collect();
        println!(
            "seed {seed}: top gaps {:?}",
            scored.iter().take(5).map(|(g, pf, _)| format!("{g:.2}/{pf:.2}")).collect::<Vec<_>>()
        );
        let c = BehavioralConstraint::TypeII { forbidden: pairs, xi: bcfg.xi };
        let g0 = perplexity(&p.vanilla, &p.splits.general).unwrap();
        for (label, opt, lr, steps) in [
            ("adam 5e-4 x64", OptimizerKind::adam_default(), 5e-4, 64usize),
            ("sgd 0.3 x256", OptimizerKind::Sgd, 0.3, 256),
        ] {
            let (un, trace) = run_targeted_unlearning(&p.vanilla, &c, lr, steps, opt, Some(1.0)).unwrap();
            let v = type2_violation(&un, &c).unwrap();
            let ratio = perplexity(&un, &p.splits.general).unwrap() / g0;
            println!("  {label}: violation {v:.4} general ratio {ratio:.3} steps {}", trace.steps.len());
        }
    }
}

#[test]
#[ignore]
fn targeted_spike_pairs() {
    // Candidates: model probability high at the full prefix but low given
    // only the last token (memorization spikes, not chain structure).
    let cfg = base_cfg();
    let bcfg = cfg.behavioral.clone().unwrap();
    for seed in 1..=5u64 {
        let p = prepare_seed(&cfg, seed, false).unwrap();
        let mut candidates: Vec<(f64, f64, ForbiddenPair)> = vec![];
        for seq in &p.splits.forget {
            for cut in bcfg.prefix_len..seq.len() - 1 {
                let prefix = seq[..cut].to_vec();
                let token = seq[cut];
                let p_full = next_token_distribution(&p.vanilla, &prefix).unwrap()[token];
                let p_struct = next_token_distribution(&p.vanilla, &prefix[cut - 1..]).unwrap()[token];
                if p_struct <= 0.03 {
                    candidates.push((p_full, p_struct, ForbiddenPair { prefix, token }));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        // Distinct (last context token, forbidden token) transitions.
        let mut pairs: Vec<ForbiddenPair> = vec![];
        let mut seen = std::collections::HashSet::new();
        for (_, _, pair) in &candidates {
            if seen.insert((pair.prefix[pair.prefix.len() - 1], pair.token)) {
                pairs.push(pair.clone());
                if pairs.len() == 5 {
                    break;
                }
            }
        }
        println!(
            "seed {seed}: {} spike candidates, top (p_full/p_struct): {:?}",
            candidates.len(),
            candidates.iter().take(5).map(|(f, s, _)| format!("{f:.2}/{s:.3}")).collect::<Vec<_>>()
        );
        if pairs.len() < 5 {
            continue;
        }
        let c = BehavioralConstraint::TypeII { forbidden: pairs, xi: bcfg.xi };
        let g0 = perplexity(&p.vanilla, &p.splits.general).unwrap();
        for (label, opt, lr, steps) in [
            ("sgd 0.02 x256", OptimizerKind::Sgd, 0.02, 256usize),
            ("sgd 0.05 x256", OptimizerKind::Sgd, 0.05, 256),
            ("adam 2e-4 x256", OptimizerKind::adam_default(), 2e-4, 256),
        ] {
            let (un, trace) = run_targeted_unlearning(&p.vanilla, &c, lr, steps, opt, Some(1.0)).unwrap();
            let v = type2_violation(&un, &c).unwrap();
            let ratio = perplexity(&un, &p.splits.general).unwrap() / g0;
            println!("  {label}: violation {v:.4} general ratio {ratio:.3} steps {}", trace.steps.len());
        }
    }
}

#[test]
#[ignore]
fn steps_sweep_instability() {
    let cfg = base_cfg();
    let t0 = Instant::now();
    let prepared: Vec<PreparedSeed> = (1..=3).map(|s| prepare_seed(&cfg, s, false).unwrap()).collect();
    println!("prep {:.1?}", t0.elapsed());
    for lr in [3e-3, 6e-3, 1e-2, 2e-2] {
        for kind in [MethodKind::RandomLabels, MethodKind::AscentDescentInDist] {
            let mut ucfg = cfg.unlearn.clone();
            ucfg.lr = lr;
            let spec = SweepSpec {
                axis: SweepAxis::OptimizationSteps,
                grid: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
                fixed: lr,
            };
            let rows = sweep_runs(&prepared, &[kind], &spec, &ucfg).unwrap();
            let summary: Vec<String> = spec
                .grid
                .iter()
                .map(|&pt| {
                    let f: Vec<f64> = rows.iter().filter(|r| r.point == pt).map(|r| r.forget_ppl).collect();
                    let n: usize = rows.iter().filter(|r| r.point == pt).map(|r| r.nan_events).sum();
                    format!("{pt}:{:.1}(n{n})", median(&f))
                })
                .collect();
            println!("lr {lr:.0e} {}: {}", kind.name(), summary.join(" "));
        }
    }
}
