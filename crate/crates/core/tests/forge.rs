//! Dataset synthesis: keyframes against an independent recount, region
//! containment, single-fault mutation fuzzing, evidence replay and
//! byte-level determinism of the written corpus.

mod common;

use common::faults::{correctly_classified, mutate_record, recount, Mutation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoomvla::env::render::CELL_PX;
use zoomvla::env::{EnvConfig, TaskSuite};
use zoomvla::forge::*;
use zoomvla::policy::PolicyConfig;
use zoomvla::trace::{Grammar, Region};
use zoomvla::vision::{zoom_in, EvidencePayload, ToolRegistry};
use zoomvla::vocab::Control;

fn demos(per_task: u64) -> Vec<Demonstration> {
    let env = EnvConfig::default();
    let suite = TaskSuite::default_suite();
    suite
        .tasks
        .iter()
        .flat_map(|t| (0..per_task).map(move |j| (t.clone(), derived_seed("demo", 5, &t.name, j))))
        .map(|(t, s)| Demonstration::record(&env, &t, s).unwrap())
        .collect()
}

#[test]
fn keyframes_match_an_independent_recount() {
    for demo in demos(12) {
        let keys = detect_keyframes(&demo);
        assert_eq!(
            keys,
            recount(&demo),
            "{} seed {}",
            demo.task.name,
            demo.seed
        );
        let expected = match demo.task.name.as_str() {
            "pick_marked_block" => 1,
            "place_marked_block" | "stack_bowls" => 2,
            "bin_three_blocks" => 6,
            other => panic!("unexpected task {other}"),
        };
        assert_eq!(
            keys.len(),
            expected,
            "{} seed {}",
            demo.task.name,
            demo.seed
        );
        assert!(
            demo.states.last().map(|s| {
                let mut sim = s.clone();
                sim.step(demo.plan.chunks.last().unwrap()).unwrap().success
            }) == Some(true)
        );
    }
}

#[test]
fn transition_examples() {
    use zoomvla::env::expert::gripper_transitions;
    assert_eq!(
        gripper_transitions(&[false, false, true, true, false]),
        vec![2, 4]
    );
    assert!(gripper_transitions(&[true; 6]).is_empty());
    assert!(gripper_transitions(&[]).is_empty());
}

#[test]
fn keyframe_regions_contain_the_dilated_target() {
    let grammar = Grammar::default();
    let policy = PolicyConfig::default();
    let ann = Annotator {
        grammar: &grammar,
        policy: &policy,
    };
    let mut checked = 0;
    for demo in demos(10) {
        for f in detect_keyframes(&demo) {
            let rec = ann.annotate_keyframe(&demo, f).unwrap();
            let region = rec.tool_region.unwrap();
            let state = &demo.states[f];
            let target = demo.plan.steps[f].target;
            let (cx, cy) = state.objects[target].cell;
            let side = state.grid_size * CELL_PX;
            let tile = Region::new(
                (cx * CELL_PX).saturating_sub(2),
                (cy * CELL_PX).saturating_sub(2),
                (cx * CELL_PX + CELL_PX + 2).min(side),
                (cy * CELL_PX + CELL_PX + 2).min(side),
            );
            assert!(region.contains_rect(&tile), "{region:?} misses {tile:?}");
            assert!(region.fits(side, side));
            assert_eq!(grammar.check_format(&rec.target), 1);
            checked += 1;
        }
        assert!(matches!(
            ann.annotate_keyframe(&demo, 0),
            Err(AnnotateError::NotKeyframe(0))
        ));
        assert!(matches!(
            ann.annotate_keyframe(&demo, demo.len()),
            Err(AnnotateError::FrameOutOfRange(_))
        ));
    }
    assert!(checked > 50);
}

#[test]
fn intermediate_records_never_call_tools() {
    let grammar = Grammar::default();
    let policy = PolicyConfig::default();
    let suite = TaskSuite::default_suite();
    let ds = build_dataset(
        &suite,
        &ForgeConfig {
            demos_per_task: 6,
            seed: 2,
        },
        &EnvConfig::default(),
        &grammar,
        &policy,
    )
    .unwrap();
    let tool_open = grammar.tok(Control::ToolOpen);
    let toward = grammar.vocab.word("toward");
    for r in &ds.records {
        assert_eq!(grammar.check_format(&r.target), 1);
        let calls = r.target.iter().filter(|&&t| t == tool_open).count();
        assert_eq!(calls > 0, r.is_keyframe);
        assert_eq!(r.tool_region.is_some(), r.is_keyframe);
        if !r.is_keyframe {
            assert_eq!(calls, 0);
            assert!(r.target.contains(&toward));
        }
    }
}

#[test]
fn single_fault_mutations_are_always_rejected_and_classified() {
    let grammar = Grammar::default();
    let policy = PolicyConfig::default();
    let ann = Annotator {
        grammar: &grammar,
        policy: &policy,
    };
    let pool: Vec<(Demonstration, Vec<CotRecord>)> = demos(4)
        .into_iter()
        .map(|d| {
            let r = ann.annotate(&d).unwrap();
            (d, r)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let kinds = [
        Mutation::TagDrop,
        Mutation::FrameSwap,
        Mutation::ChunkEdit,
        Mutation::RegionShift,
    ];
    let mut per_kind = [0usize; 4];
    let mut total = 0;
    while total < 1000 {
        let k = total % 4;
        let (demo, records) = &pool[rng.gen_range(0..pool.len())];
        let candidates: Vec<usize> = match kinds[k] {
            Mutation::RegionShift => (0..records.len())
                .filter(|&i| records[i].is_keyframe)
                .collect(),
            _ => (0..records.len()).collect(),
        };
        let i = candidates[rng.gen_range(0..candidates.len())];
        let prev = i.checked_sub(1).map(|p| records[p].frame_id);
        assert_eq!(
            validate_trace(&grammar, &policy, &records[i], demo, prev),
            Ok(())
        );
        let Some(bad) = mutate_record(&grammar, &records[i], demo, kinds[k], &mut rng) else {
            continue;
        };
        let errs =
            validate_trace(&grammar, &policy, &bad, demo, prev).expect_err("mutation accepted");
        assert!(
            correctly_classified(kinds[k], &errs),
            "{:?} classified as {errs:?}",
            kinds[k]
        );
        per_kind[k] += 1;
        total += 1;
    }
    assert!(per_kind.iter().all(|&n| n == 250), "{per_kind:?}");
}

#[test]
fn out_of_bounds_region_is_reported() {
    let grammar = Grammar::default();
    let policy = PolicyConfig::default();
    let ann = Annotator {
        grammar: &grammar,
        policy: &policy,
    };
    let demo = &demos(1)[1];
    let f = detect_keyframes(demo)[0];
    let mut rec = ann.annotate_keyframe(demo, f).unwrap();
    let r = rec.tool_region.unwrap();
    rec.tool_region = Some(Region::new(r.x0 + 40, r.y0, r.x1 + 40, r.y1));
    let errs = validate_trace(&grammar, &policy, &rec, demo, None).unwrap_err();
    assert!(errs.contains(&ValidationError::RegionOutOfFrame));
    assert!(errs.contains(&ValidationError::RegionMismatch));
}

#[test]
fn validation_reports_every_violation() {
    let grammar = Grammar::default();
    let policy = PolicyConfig::default();
    let ann = Annotator {
        grammar: &grammar,
        policy: &policy,
    };
    let demo = &demos(1)[0];
    let f = detect_keyframes(demo)[0];
    let mut rec = ann.annotate_keyframe(demo, f).unwrap();
    rec.is_keyframe = false;
    rec.frame_id = demo.len() + 3;
    let errs = validate_trace(&grammar, &policy, &rec, demo, Some(demo.len() + 5)).unwrap_err();
    for e in [
        ValidationError::ToolOnIntermediate,
        ValidationError::FrameOrder {
            prev: demo.len() + 5,
            frame: demo.len() + 3,
        },
        ValidationError::FrameOutOfRange {
            frame: demo.len() + 3,
            len: demo.len(),
        },
    ] {
        assert!(errs.contains(&e), "{e:?} missing from {errs:?}");
    }
}

#[test]
fn written_evidence_replays_pixel_exactly() {
    let grammar = Grammar::default();
    let policy = PolicyConfig::default();
    let env = EnvConfig::default();
    let suite = TaskSuite::default_suite();
    let res = policy.evidence_res as u32;
    let registry = ToolRegistry::with_zoom(res);
    let ds = build_dataset(
        &suite,
        &ForgeConfig {
            demos_per_task: 5,
            seed: 9,
        },
        &env,
        &grammar,
        &policy,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path(), res).unwrap();
    let back = Dataset::read(dir.path(), &policy).unwrap();
    assert_eq!(back.records, ds.records);
    assert_eq!(back.stats, ds.stats);
    let mut replayed = 0;
    for (i, r) in back.records.iter().enumerate() {
        let task = suite.tasks.iter().find(|t| t.name == r.task).unwrap();
        let demo = Demonstration::record(&env, task, r.demo_seed).unwrap();
        let evidence = back.evidence(i, &registry);
        match r.tool_region {
            Some(region) => {
                let fresh = zoom_in(&demo.frames[r.frame_id].image, region, res).unwrap();
                assert_eq!(evidence, vec![EvidencePayload::Patch(fresh)]);
                replayed += 1;
            }
            None => assert!(evidence.is_empty()),
        }
    }
    assert_eq!(replayed, ds.stats.total.keyframe_records);
}

#[test]
fn stats_match_a_recount_of_the_raw_demos() {
    let grammar = Grammar::default();
    let policy = PolicyConfig::default();
    let env = EnvConfig::default();
    let suite = TaskSuite::default_suite();
    let cfg = ForgeConfig {
        demos_per_task: 7,
        seed: 4,
    };
    let ds = build_dataset(&suite, &cfg, &env, &grammar, &policy).unwrap();
    let (mut frames, mut transitions) = (0, 0);
    for task in &suite.tasks {
        let (mut tf, mut tt) = (0, 0);
        for j in 0..cfg.demos_per_task {
            let demo = Demonstration::record(
                &env,
                task,
                derived_seed("demo", cfg.seed, &task.name, j as u64),
            )
            .unwrap();
            tf += demo.len();
            tt += recount(&demo).len();
        }
        let c = &ds.stats.per_task[&task.name];
        assert_eq!(
            (c.records, c.keyframe_records, c.demos),
            (tf, tt, cfg.demos_per_task)
        );
        frames += tf;
        transitions += tt;
    }
    assert_eq!(ds.stats.total.records, frames);
    assert_eq!(ds.stats.total.keyframe_records, transitions);
    assert_eq!(ds.stats.total.intermediate_records, frames - transitions);
    assert_eq!(ds.len(), frames);
    let tiers: usize = ds.stats.per_tier.values().map(|c| c.records).sum();
    assert_eq!(tiers, frames);
}

#[test]
fn synthesis_is_byte_identical_across_runs() {
    let grammar = Grammar::default();
    let policy = PolicyConfig::default();
    let env = EnvConfig::default();
    let suite = TaskSuite::default_suite();
    let cfg = ForgeConfig {
        demos_per_task: 3,
        seed: 11,
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        build_dataset(&suite, &cfg, &env, &grammar, &policy)
            .unwrap()
            .write(d.path(), 24)
            .unwrap();
    }
    for f in [DATASET_FILE, FRAMES_FILE, STATS_FILE, DEMOS_FILE] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn empty_inputs_give_an_empty_dataset() {
    let grammar = Grammar::default();
    let policy = PolicyConfig::default();
    let env = EnvConfig::default();
    let empty = TaskSuite { tasks: vec![] };
    let ds = build_dataset(&empty, &ForgeConfig::default(), &env, &grammar, &policy).unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.stats, DatasetStats::default());
    let ds = build_dataset(
        &TaskSuite::default_suite(),
        &ForgeConfig {
            demos_per_task: 0,
            seed: 0,
        },
        &env,
        &grammar,
        &policy,
    )
    .unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.stats.total, Counts::default());
}

#[test]
fn demo_seeds_never_collide_with_evaluation_seeds() {
    for j in 0..1000 {
        assert!(derived_seed("demo", 0, "pick_marked_block", j) >= 1 << 63);
    }
}
