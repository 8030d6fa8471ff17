//! Pipeline harness: run configuration, report arithmetic, evaluation
//! determinism, the ablation runner and curve post-processing.

mod common;

use common::rough_params;
use proptest::prelude::*;
use zoomvla::env::Tier;
use zoomvla::grpo::{curves_csv, CurveRecord, GrpoConfig};
use zoomvla::harness::*;
use zoomvla::policy::{CheckpointError, PolicyConfig, PolicyParams};
use zoomvla::rollout::LoopBudget;
use zoomvla::sft::SftConfig;

/// One short task, a handful of demos and minimal training budgets.
fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.tasks.truncate(1);
    c.forge.demos_per_task = 2;
    c.sft = SftConfig {
        epochs: 2,
        batch_size: 4,
        ..SftConfig::default()
    };
    c.rl = GrpoConfig {
        iterations: 2,
        group_size: 2,
        groups_per_update: 2,
        ..GrpoConfig::default()
    };
    c.budget = LoopBudget {
        max_decision_steps: 3,
        ..LoopBudget::default()
    };
    c.eval.episodes = 2;
    c
}

/// Moving mean through prefix sums, a formulation independent of the windowed sum.
fn prefix_moving_mean(v: &[f64], w: usize) -> Vec<f64> {
    let mut prefix = vec![0.0];
    for x in v {
        prefix.push(prefix.last().unwrap() + x);
    }
    (0..v.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            (prefix[i + 1] - prefix[lo]) / (i + 1 - lo) as f64
        })
        .collect()
}

proptest! {
    #[test]
    fn smoothing_matches_a_prefix_sum_recomputation(v in prop::collection::vec(-10.0f64..10.0, 1..300), w in 1usize..25) {
        let a = moving_mean(&v, w);
        let b = prefix_moving_mean(&v, w);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn smoothing_a_constant_series_is_that_constant(c in -1e3f64..1e3, n in 1usize..200) {
        for s in moving_mean(&vec![c; n], SMOOTHING_WINDOW) {
            prop_assert!((s - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }
}

fn fake_curve(n: usize) -> Vec<CurveRecord> {
    (0..n)
        .map(|i| CurveRecord {
            iteration: i,
            mean_reward: 0.5 + 0.001 * i as f64,
            mean_success: 0.4 + 0.002 * i as f64,
            mean_response_len: 100.0 - 0.1 * i as f64,
            tool_call_rate: 0.3,
            kl_mean: 1e-3 * i as f64,
            grad_norm: 0.5,
        })
        .collect()
}

#[test]
fn tidy_curves_hold_raw_and_smoothed_series() {
    let curve = fake_curve(30);
    let rows = tidy_curves(&parse_curves(&curves_csv(&curve)).unwrap());
    assert_eq!(rows.len(), 6 * 2 * 30);
    for m in [
        "mean_reward",
        "mean_response_len",
        "mean_success_smoothed",
        "mean_response_len_smoothed",
    ] {
        assert_eq!(rows.iter().filter(|r| r.metric == m).count(), 30, "{m}");
    }
    let smooth: Vec<f64> = rows
        .iter()
        .filter(|r| r.metric == "mean_success_smoothed")
        .map(|r| r.value)
        .collect();
    let raw: Vec<f64> = curve.iter().map(|r| r.mean_success).collect();
    let oracle = prefix_moving_mean(&raw, 10);
    assert!(smooth
        .iter()
        .zip(&oracle)
        .all(|(a, b)| (a - b).abs() < 1e-12));
    let csv = tidy_csv(&rows);
    assert!(csv.starts_with("metric,iteration,value\nmean_reward,0,0.5\n"));
    let (first, last) = window_trend(&curve, "mean_success").unwrap();
    assert!((first - raw[..10].iter().sum::<f64>() / 10.0).abs() < 1e-12);
    assert!((last - raw[20..].iter().sum::<f64>() / 10.0).abs() < 1e-12);
}

#[test]
fn curve_files_without_metrics_are_rejected() {
    assert!(matches!(
        parse_curves(""),
        Err(HarnessError::MissingMetrics(_))
    ));
    let header_only =
        "iteration,mean_reward,mean_success,mean_response_len,tool_call_rate,kl_mean,grad_norm\n";
    assert!(matches!(
        parse_curves(header_only),
        Err(HarnessError::MissingMetrics(_))
    ));
    match parse_curves("iteration,mean_reward\n0,1.0\n") {
        Err(e @ HarnessError::MissingMetrics(_)) => {
            assert!(e.to_string().contains("mean_response_len"));
            assert_eq!(e.exit_code(), 11);
        }
        other => panic!("expected missing metrics, got {other:?}"),
    }
    let bad_value = format!("{header_only}0,1,x,1,1,1,1\n");
    assert!(matches!(
        parse_curves(&bad_value),
        Err(HarnessError::MissingMetrics(_))
    ));
}

#[test]
fn config_rejects_unknown_keys_and_fills_defaults() {
    for text in [
        "bogus = 1",
        "[sft]\nlr = 0.1",
        "[rl.reward]\nalpha = 1.0",
        "[eval]\nepisodes = 5\nseeds = 3",
    ] {
        let e = RunConfig::from_toml(text).unwrap_err();
        assert!(matches!(e, HarnessError::Config(_)), "{text}: {e}");
        assert_eq!(e.exit_code(), 3);
    }
    let c = RunConfig::from_toml("[sft]\nbatch_size = 32\n[rl]\nbeta = 0.5").unwrap();
    assert_eq!(c.sft.batch_size, 32);
    assert_eq!(c.sft.epochs, SftConfig::default().epochs);
    assert_eq!(c.rl.beta, 0.5);
    assert_eq!(c.rl.group_size, 8);
    assert_eq!(
        c.eval,
        EvalConfig {
            episodes: 50,
            seed: 0
        }
    );
    assert_eq!(c.tasks.len(), 4);
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
}

#[test]
fn inconsistent_configs_are_rejected() {
    for text in [
        "[env]\nchunk_len = 3",
        "[policy]\nvocab_size = 64",
        "[budget]\nmax_seq_len = 500",
        "[eval]\nepisodes = 0",
        "[rl]\neps_low = 0.5\neps_high = 0.3",
    ] {
        assert!(
            matches!(RunConfig::from_toml(text), Err(HarnessError::Config(_))),
            "{text}"
        );
    }
}

#[test]
fn global_seed_propagates_and_the_hash_tracks_content() {
    let c = RunConfig::from_toml("seed = 42").unwrap();
    assert_eq!(
        (c.init_seed, c.forge.seed, c.sft.seed, c.rl.seed),
        (42, 42, 42, 42)
    );
    let again = RunConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(again, c);
    assert_eq!(again.content_hash(), c.content_hash());
    assert_eq!(c.content_hash().len(), 64);
    let other = c.clone().with_seed(43).unwrap();
    assert_ne!(other.content_hash(), c.content_hash());
    let unseeded = RunConfig::from_toml("[sft]\nseed = 7").unwrap();
    assert_eq!((unseeded.sft.seed, unseeded.rl.seed), (7, 0));
}

fn row(task: &str, tier: Tier, ambiguous: bool, t: EvalTotals) -> TaskEval {
    TaskEval {
        task: task.into(),
        tier,
        ambiguous,
        summary: EvalSummary::from_totals(t),
    }
}

fn totals(
    episodes: usize,
    successes: usize,
    steps: usize,
    tokens: usize,
    with_tools: usize,
    calls: usize,
) -> EvalTotals {
    EvalTotals {
        episodes,
        successes,
        steps,
        decision_steps: steps / 4,
        response_tokens: tokens,
        episodes_with_tools: with_tools,
        tool_calls: calls,
    }
}

#[test]
fn aggregates_are_episode_weighted_means_of_task_rows() {
    let rows = vec![
        row("a", Tier::Short, true, totals(50, 40, 400, 2000, 45, 60)),
        row("b", Tier::Short, false, totals(30, 6, 300, 900, 3, 3)),
        row("c", Tier::Long, true, totals(20, 5, 800, 4000, 20, 40)),
    ];
    let rep = EvalReport::assemble(true, 50, 0, rows.clone());
    let weighted = |sel: &dyn Fn(&TaskEval) -> bool, f: &dyn Fn(&EvalSummary) -> f64| {
        let n: usize = rows
            .iter()
            .filter(|r| sel(r))
            .map(|r| r.summary.totals.episodes)
            .sum();
        rows.iter()
            .filter(|r| sel(r))
            .map(|r| f(&r.summary) * r.summary.totals.episodes as f64)
            .sum::<f64>()
            / n as f64
    };
    let metrics: [&dyn Fn(&EvalSummary) -> f64; 4] = [
        &|s| s.success_rate,
        &|s| s.mean_episode_len,
        &|s| s.mean_response_len,
        &|s| s.tool_call_rate,
    ];
    for f in metrics {
        assert!((f(&rep.overall) - weighted(&|_| true, f)).abs() < 1e-12);
        assert!(
            (f(&rep.tiers[&Tier::Short]) - weighted(&|r| r.tier == Tier::Short, f)).abs() < 1e-12
        );
        assert!(
            (f(&rep.tiers[&Tier::Long]) - weighted(&|r| r.tier == Tier::Long, f)).abs() < 1e-12
        );
        assert!((f(rep.ambiguous.as_ref().unwrap()) - weighted(&|r| r.ambiguous, f)).abs() < 1e-12);
    }
    assert_eq!(rep.overall.success_rate, 51.0 / 100.0);
    assert_eq!(rep.tiers.len(), 2);
    assert!(rep
        .tiers
        .values()
        .chain([&rep.overall])
        .all(|s| (0.0..=1.0).contains(&s.success_rate)));
    let back: EvalReport = serde_json::from_str(&rep.to_json()).unwrap();
    assert_eq!(back, rep);
}

#[test]
fn evaluation_is_deterministic_and_single_episodes_give_binary_rates() {
    let mut cfg = tiny();
    cfg.tasks = RunConfig::default().tasks;
    let p = rough_params(cfg.policy, 3, 0.3);
    let a = evaluate(&cfg, &p, true).unwrap();
    let b = evaluate(&cfg, &p, true).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.tasks.len(), 4);
    assert_eq!(a.overall.totals.episodes, 8);
    cfg.eval.episodes = 1;
    let one = evaluate(&cfg, &p, false).unwrap();
    assert!(!one.tools);
    for t in &one.tasks {
        assert!(t.summary.success_rate == 0.0 || t.summary.success_rate == 1.0);
        assert!(t.summary.tool_call_rate == 0.0 || t.summary.tool_call_rate == 1.0);
    }
}

#[test]
fn checkpoints_from_another_architecture_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("other.ckpt");
    PolicyParams::init(
        PolicyConfig {
            d_model: 16,
            ..PolicyConfig::default()
        },
        0,
    )
    .save(&path)
    .unwrap();
    let cfg = RunConfig::default();
    let e = HarnessError::from(PolicyParams::load(&path, Some(&cfg.policy)).unwrap_err());
    assert!(matches!(
        e,
        HarnessError::Checkpoint(CheckpointError::Mismatch { .. })
    ));
    assert_eq!(e.exit_code(), 7);
    assert_eq!(e.record()["error"], "checkpoint_mismatch");
}

#[test]
fn synthesis_is_reproducible_and_zero_demos_is_vacuous() {
    let cfg = tiny();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        synthesize(&cfg)
            .unwrap()
            .write(d.path(), cfg.policy.evidence_res as u32)
            .unwrap();
    }
    for f in ["dataset.jsonl", "frames.bin", "stats.json", "demos.jsonl"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        assert!(!a.is_empty(), "{f}");
        assert_eq!(a, std::fs::read(dirs[1].path().join(f)).unwrap(), "{f}");
    }
    let mut empty = cfg;
    empty.forge.demos_per_task = 0;
    let ds = synthesize(&empty).unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.stats.total.records, 0);
}

#[test]
fn ablation_runs_every_variant_on_the_same_seeds() {
    let cfg = tiny();
    let ds = synthesize(&cfg).unwrap();
    let (table, art) = ablation(&cfg, &ds);
    assert_eq!(
        table.rows.iter().map(|r| r.variant).collect::<Vec<_>>(),
        Variant::ALL
    );
    for v in Variant::ALL {
        let rep = table
            .get(v)
            .unwrap_or_else(|| panic!("{v:?} failed: {:?}", table.rows));
        assert_eq!(
            (rep.seed, rep.episodes_per_task),
            (cfg.eval.seed, cfg.eval.episodes)
        );
    }
    assert!(art.sft.is_some() && art.scratch.is_some() && art.sft_rl.is_some());
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(3).unwrap().starts_with("sft_rl,"));
}

#[test]
fn a_failing_variant_does_not_stop_the_others() {
    let mut cfg = tiny();
    cfg.sft.batch_size = 10_000;
    let ds = synthesize(&cfg).unwrap();
    let (table, art) = ablation(&cfg, &ds);
    assert!(table.get(Variant::SftOnly).is_none());
    assert!(table.get(Variant::SftRl).is_none());
    assert!(table.get(Variant::RlFromScratch).is_some());
    assert!(table.rows[0]
        .error
        .as_deref()
        .unwrap()
        .contains("batch size"));
    assert!(art.sft.is_none() && art.scratch.is_some());
}
