//! One test per acceptance criterion. Each prints a single PASS/FAIL line to
//! stderr (uncaptured) and then asserts.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;

use timemark::codec::{
    insert_markers, parse_marker, parse_markers, strip_markers, AlignedTranscript, AlignedWord, TimeMarker,
};
use timemark::config::RunConfig;
use timemark::dataset::marker_calibration;
use timemark::eval::{bin_report, mae, mape, EvalRecord, EvalReport};
use timemark::grpo::{chord_alpha, clipped_term, group_advantages, ChordSchedule};
use timemark::pipeline::{self, run_pipeline, PipelineSummary};
use timemark::policy::PromptContext;
use timemark::reward::{
    copy_penalty, gaussian_score, main_reward, monotonicity_reward, presence_reward, repetition_penalty, total_reward,
    RewardConfig,
};

const OCEAN_15S: &str = "Well, <0.9 seconds> so, <1.6 seconds> the sea floor sits far below the surface in many spots.\n\
<3.8 seconds> Its lowest known point lies in a Pacific trench, <7.2 seconds> roughly eleven kilometers down.\n\
<9.4 seconds> Averaged across the globe, <11.0 seconds> ocean depth comes to a little under four kilometers. <15.0 seconds>";
const OCEAN_MARKERS: [f64; 7] = [0.9, 1.6, 3.8, 7.2, 9.4, 11.0, 15.0];

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[{}] criterion {id:>2} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn criterion_01_reward_golden() {
    let started = Instant::now();
    let cfg = RewardConfig::default();
    let ocean = &OCEAN_MARKERS[..];
    let mut failures = Vec::new();
    let mut check = |label: &str, got: f64, want: f64| {
        if !close(got, want, 1e-9) {
            failures.push(format!("{label}: got {got}, want {want}"));
        }
    };
    check("F(0)", gaussian_score(0.0, 5.0).unwrap(), 1.0);
    check("F(5)", gaussian_score(5.0, 5.0).unwrap(), (-0.5f64).exp());
    check("F(-10)", gaussian_score(-10.0, 5.0).unwrap(), (-2.0f64).exp());
    check("main ocean", main_reward(15.0, ocean, &cfg), 1.0);
    check("main empty", main_reward(15.0, &[], &cfg), 0.0);
    check(
        "main 40",
        main_reward(40.0, &[1.5, 2.3, 4.6, 10.8, 12.5, 15.5, 40.0], &cfg),
        1.0,
    );
    check("presence empty", presence_reward(&[]), 0.0);
    check("presence one", presence_reward(&[1.0]), 1.0);
    check("presence ocean", presence_reward(ocean), 1.0);
    check("mono ocean", monotonicity_reward(ocean), 1.0);
    check("mono 3,2,5", monotonicity_reward(&[3.0, 2.0, 5.0]), 0.5);
    check("mono single", monotonicity_reward(&[7.0]), 1.0);
    check("rep unique", repetition_penalty(&[1.0, 2.0, 3.0]), 0.0);
    check("rep 1,2,1", repetition_penalty(&[1.0, 2.0, 1.0]), -1.0 / 3.0);
    check("rep 5,5,5", repetition_penalty(&[5.0, 5.0, 5.0]), -2.0 / 3.0);
    check("copy -0.75", copy_penalty(&[10.0, 10.2, 9.8, 10.0], 10.0, 0.5), -0.75);
    check("copy ocean", copy_penalty(ocean, 15.0, 0.5), 0.0);
    check("copy final only", copy_penalty(&[15.0], 15.0, 0.5), 0.0);
    let totals = [
        (15.0, ocean.to_vec(), [1.0, 1.0, 1.0, 0.0, 0.0], 3.0),
        (15.0, vec![], [0.0, 0.0, 1.0, 0.0, 0.0], 1.0),
        (10.0, vec![10.0; 3], [1.0, 1.0, 0.0, -2.0 / 3.0, -2.0 / 3.0], 2.0 / 3.0),
    ];
    for (t, m, parts, total) in totals {
        let b = total_reward(t, &m, &cfg).unwrap();
        for (got, want) in [b.main, b.presence, b.monotonicity, b.repetition, b.copy]
            .into_iter()
            .zip(parts)
        {
            check("breakdown", got, want);
        }
        check("total", b.total, total);
    }
    let elapsed = started.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(1);
    report(
        1,
        "reward golden suite",
        pass,
        &format!("24 values within 1e-9, ocean total 3.0, {elapsed:.2?} {failures:?}"),
    );
}

#[test]
fn criterion_02_reward_properties() {
    let started = Instant::now();
    let cfg = RewardConfig::default();
    let mut rng = common::rng(2);
    let mut violations = 0;
    for _ in 0..10_000 {
        let t_inst = rng.gen_range(1.0..60.0);
        let m: Vec<f64> = (0..rng.gen_range(0..12))
            .map(|_| f64::from(rng.gen_range(0u32..700)) / 10.0)
            .collect();
        let b = total_reward(t_inst, &m, &cfg).unwrap();
        let ok = (0.0..=1.0).contains(&b.main)
            && (b.presence == 0.0 || b.presence == 1.0)
            && (0.0..=1.0).contains(&b.monotonicity)
            && (-1.0..=0.0).contains(&b.repetition)
            && b.copy > -1.0
            && b.copy <= 0.0
            && b.total > -2.0
            && b.total <= 3.0;

        // A constant copy of the target against a calibrated, increasing list
        // ending on the target with no early marker within tau of it.
        let copy = vec![t_inst; rng.gen_range(2..8)];
        let k = rng.gen_range(1..8);
        let mut good: Vec<f64> = (0..k - 1)
            .map(|_| rng.gen_range(0.0..t_inst - cfg.tau_s - 1e-6))
            .collect();
        good.sort_by(f64::total_cmp);
        good.dedup();
        good.push(t_inst);
        let ordered =
            total_reward(t_inst, &copy, &cfg).unwrap().total < total_reward(t_inst, &good, &cfg).unwrap().total;
        if !(ok && ordered) {
            violations += 1;
        }
    }
    let elapsed = started.elapsed();
    let pass = violations == 0 && elapsed < Duration::from_secs(10);
    report(
        2,
        "reward property suite",
        pass,
        &format!("10000 lists, {violations} violations, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_03_gradient_oracle() {
    let started = Instant::now();
    let mut rng = common::rng(3);
    let (mut worst_sft, mut worst_mixed) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let policy = common::small_policy(&mut rng);
        let inst = common::sft_instance(&policy, &mut rng);
        worst_sft = worst_sft.max(common::fd_relative_error(&policy, &inst));
    }
    let (mut checked, mut redrawn) = (0, 0);
    while checked < 100 {
        let policy = common::small_policy(&mut rng);
        let Some(inst) = common::mixed_instance(&policy, &mut rng) else {
            redrawn += 1;
            continue;
        };
        worst_mixed = worst_mixed.max(common::fd_relative_error(&policy, &inst));
        checked += 1;
    }
    let elapsed = started.elapsed();
    let pass =
        worst_sft < common::FD_TOLERANCE && worst_mixed < common::FD_TOLERANCE && elapsed < Duration::from_secs(30);
    report(
        3,
        "gradient oracle",
        pass,
        &format!(
            "worst relative error SFT {worst_sft:.1e}, mixed {worst_mixed:.1e} over 100+100 instances ({redrawn} near-kink redraws), {elapsed:.2?}"
        ),
    );
}

#[test]
fn criterion_04_grpo_algebra() {
    let mut rng = common::rng(4);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let g = rng.gen_range(2..12);
        let r: Vec<f64> = (0..g).map(|_| rng.gen_range(-2.0..3.0)).collect();
        if r.iter().all(|x| *x == r[0]) {
            continue;
        }
        let a = group_advantages(&r, 1e-8).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    let clip_ok = [0.7, -1.3, 2.0].iter().all(|&a| clipped_term(1.0, a, 0.2) == a)
        && clipped_term(1.5, 1.0, 0.2) == 1.2
        && clipped_term(0.5, -1.0, 0.2) == -0.8;
    let sched = ChordSchedule::default();
    let alpha_ok = chord_alpha(0, &sched) == 0.8 && [500, 501, 10_000].iter().all(|&s| chord_alpha(s, &sched) == 0.3);
    let pass = worst_mean <= 1e-9 && worst_var <= 1e-6 && clip_ok && alpha_ok;
    report(
        4,
        "GRPO algebra",
        pass,
        &format!("|mean| <= {worst_mean:.1e}, |var-1| <= {worst_var:.1e}, clip examples {clip_ok}, alpha endpoints {alpha_ok}"),
    );
}

#[test]
fn criterion_05_codec_round_trips() {
    let format_ok = (0..=1200).all(|t| {
        let m = TimeMarker::from_tenths(t);
        parse_marker(&m.to_string()) == Some(m)
    });
    let mut rng = common::rng(5);
    let mut strip_failures = 0;
    for i in 0..1000 {
        let mut t = 0.0;
        let words: Vec<AlignedWord> = (0..rng.gen_range(1..30))
            .map(|_| {
                let len = rng.gen_range(1..8);
                let mut w: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
                if rng.gen_bool(0.3) {
                    w.push(['.', ',', '!', '?', ';'][rng.gen_range(0..5)]);
                }
                let start = t;
                t += rng.gen_range(0.05..0.9);
                AlignedWord::new(w, start, t)
            })
            .collect();
        let transcript = AlignedTranscript::new(format!("t{i}"), words);
        let clean = transcript
            .words
            .iter()
            .map(|w| w.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        if strip_markers(&insert_markers(&transcript).unwrap().render()) != clean {
            strip_failures += 1;
        }
    }
    let (clean, markers) = parse_markers(OCEAN_15S);
    let values: Vec<f64> = markers.iter().map(|m| m.marker.seconds()).collect();
    let ocean_ok = !clean.contains("seconds>") && strip_markers(OCEAN_15S) == clean && values == OCEAN_MARKERS;
    let pass = format_ok && strip_failures == 0 && ocean_ok;
    report(
        5,
        "codec round-trips",
        pass,
        &format!("parse(format) over 0..120 s {format_ok}, strip(insert) failures {strip_failures}/1000, ocean markers {values:?}"),
    );
}

#[test]
fn criterion_06_metrics_golden() {
    let pair = vec![EvalRecord::new("a", 15.0, 15.2), EvalRecord::new("b", 40.0, 41.6)];
    let (m, p) = (mae(&pair).unwrap(), mape(&pair).unwrap());
    let golden = close(m, 0.9, 1e-9) && close(p, 8.0 / 3.0, 1e-9);
    let mut rng = common::rng(6);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..50);
        let records: Vec<EvalRecord> = (0..n)
            .map(|i| EvalRecord::new(format!("{i}"), rng.gen_range(1.0..60.0), rng.gen_range(0.0..80.0)))
            .collect();
        let mut shuffled = records.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        let doubled: Vec<EvalRecord> = records
            .iter()
            .map(|r| EvalRecord::new(r.id.clone(), 2.0 * r.t_inst_s, 2.0 * r.actual_s))
            .collect();
        let (m0, p0) = (mae(&records).unwrap(), mape(&records).unwrap());
        let ok = close(mae(&shuffled).unwrap(), m0, 1e-9)
            && close(mape(&shuffled).unwrap(), p0, 1e-9)
            && close(mae(&doubled).unwrap(), 2.0 * m0, 1e-9)
            && close(mape(&doubled).unwrap(), p0, 1e-9);
        if !ok {
            violations += 1;
        }
    }
    let pass = golden && violations == 0;
    report(
        6,
        "metrics golden",
        pass,
        &format!("MAE {m:.4} s, MAPE {p:.4}%, property violations {violations}/1000"),
    );
}

struct DefaultRun {
    _dir: tempfile::TempDir,
    out: PathBuf,
    cfg: RunConfig,
    summary: PipelineSummary,
    elapsed: Duration,
}

fn default_run() -> &'static DefaultRun {
    static RUN: OnceLock<DefaultRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_path_buf();
        let cfg = RunConfig::default();
        let started = Instant::now();
        let summary = run_pipeline(&cfg, &out).unwrap();
        DefaultRun {
            _dir: dir,
            out,
            cfg,
            summary,
            elapsed: started.elapsed(),
        }
    })
}

#[test]
fn criterion_07_end_to_end() {
    let run = default_run();
    let cfg = &run.cfg;
    let (_, clock) = pipeline::setup(cfg).unwrap();
    let sft = pipeline::load_policy(cfg, &run.out.join(pipeline::SFT_CHECKPOINT)).unwrap();
    // Fresh free generations from seeds the dataset never used, under the
    // evaluation budget so that responses finish. The training-cap figure is
    // reported alongside.
    let prompts = vec![PromptContext::free(); cfg.eval.n];
    let (_, calib) = marker_calibration(&sft, &clock, &prompts, cfg.lengths.eval_max_len, cfg.seed).unwrap();
    let (_, capped) = marker_calibration(&sft, &clock, &prompts, cfg.lengths.train_max_len, cfg.seed).unwrap();
    let (s1, s2) = (run.summary.stage1.mape_pct, run.summary.stage2.mape_pct);
    let reduction = 1.0 - s2 / s1;
    let a = calib.mean_abs_error_s < 0.5;
    let b = reduction >= 0.4;
    let c = s2 < 15.0;
    let fast = run.elapsed < Duration::from_secs(600);
    report(
        7,
        "end-to-end toy reproduction",
        a && b && c && fast,
        &format!(
            "(a) stage-1 calibration {:.3} s over {} generations ({:.3} s at the training cap); (b) MAPE {s1:.1}% -> {s2:.1}%, {:.0}% reduction; (c) final MAPE {s2:.1}%; runtime {:.1?}",
            calib.mean_abs_error_s,
            calib.n,
            capped.mean_abs_error_s,
            100.0 * reduction,
            run.elapsed
        ),
    );
}

fn eval_range(cfg: &RunConfig, checkpoint: &Path, out: &Path, lo: f64, hi: f64) -> EvalReport {
    let cfg = cfg
        .with_overrides(&[format!("eval.targets.lo_s={lo}"), format!("eval.targets.hi_s={hi}")])
        .unwrap();
    pipeline::cmd_eval(&cfg, checkpoint, out).unwrap()
}

#[test]
fn criterion_08_generalization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = RunConfig::default()
        .with_overrides(&[
            "train_targets.lo_s=4",
            "train_targets.hi_s=10",
            "eval.targets.lo_s=4",
            "eval.targets.hi_s=10",
        ])
        .unwrap();
    let summary = run_pipeline(&cfg, out).unwrap();
    let in_range = summary.stage2.mape_pct;
    let tico = eval_range(
        &cfg,
        &out.join(pipeline::GRPO_CHECKPOINT),
        &out.join("ext_grpo"),
        10.0,
        14.0,
    )
    .mape_pct;
    let stage1 = eval_range(
        &cfg,
        &out.join(pipeline::SFT_CHECKPOINT),
        &out.join("ext_sft"),
        10.0,
        14.0,
    )
    .mape_pct;
    let init = eval_range(
        &cfg,
        &out.join(pipeline::INIT_CHECKPOINT),
        &out.join("ext_init"),
        10.0,
        14.0,
    )
    .mape_pct;
    let pass = tico < stage1 && tico < init && tico <= 2.0 * in_range;
    report(
        8,
        "generalization",
        pass,
        &format!(
            "10-14 s MAPE: trained {tico:.1}% vs stage-1 {stage1:.1}% and initial {init:.1}%; in-range 4-10 s {in_range:.1}% (bound {:.1}%)",
            2.0 * in_range
        ),
    );
}

#[test]
fn criterion_09_calibration() {
    let run = default_run();
    let records = timemark::eval::load_records(&run.out.join("stage2_eval").join(pipeline::EVAL_RECORDS)).unwrap();
    let with_marker: Vec<&EvalRecord> = records.iter().filter(|r| r.t_last_s.is_some()).collect();
    let n = with_marker.len() as f64;
    let marker = with_marker
        .iter()
        .map(|r| (r.t_last_s.unwrap() - r.actual_s).abs())
        .sum::<f64>()
        / n;
    let target = with_marker.iter().map(|r| (r.t_inst_s - r.actual_s).abs()).sum::<f64>() / n;
    let pass = records.len() == 500 && with_marker.len() == records.len() && marker <= target;
    report(
        9,
        "calibration",
        pass,
        &format!(
            "{} generations ({} with a marker): mean |t_last - d| {marker:.3} s <= mean |t_inst - d| {target:.3} s",
            records.len(),
            with_marker.len()
        ),
    );
    let report = bin_report(&records, run.cfg.eval.bin_width_s).unwrap();
    assert_eq!(report.calibration.unwrap().marker_mae_s, marker);
}

fn all_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn criterion_10_determinism() {
    let run = default_run();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&run.cfg, dir.path()).unwrap();
    let (first, second) = (all_files(&run.out), all_files(dir.path()));
    let differing: Vec<&PathBuf> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    let pass = !first.is_empty() && differing.is_empty();
    report(
        10,
        "determinism",
        pass,
        &format!(
            "{} files compared byte for byte, {} differ {differing:?}",
            first.len(),
            differing.len()
        ),
    );
}
