//! One pass/fail line per acceptance criterion. Exits nonzero if any fails.

mod common;

use std::time::{Duration, Instant};

use common::GradCheck;
use vader_core::caes::{caes, CaesConfig, SegmentTag};
use vader_core::eval::{ablation_grid, roc_auc};
use vader_core::ingest::{load_bundle, write_bundle};
use vader_core::pipeline::{analyze_corpus, run_pipeline, PipelineConfig, TIMINGS_FILE};
use vader_core::scoring::ScoreSeries;
use vader_core::synth::{corpus_specs, generate_scenario, CorpusSpec};
use vader_core::tracking::assign;
use vader_core::volatility::{
    frame_volatility, gaussian_smooth, mine_samples, relations_by_pair, select_positives, Label, MiningConfig,
    VideoCurve,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()))
}

fn assignment_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = common::rng(1);
    for k in 0..1000 {
        let cost = common::random_cost_matrix(&mut rng);
        let got = assign(&cost);
        let want = common::brute_force_assign(&cost);
        ensure((got.pairs.len(), got.total_cost) == want, || {
            format!("matrix {k}: got {:?}, brute force {want:?}", (got.pairs.len(), got.total_cost))
        })?;
    }
    within(start.elapsed(), 10.0)?;
    Ok(format!("1000 matrices in {:.2} s", start.elapsed().as_secs_f64()))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = common::rng(2);
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    while checked < 100 {
        match common::gradient_check_instance(&mut rng) {
            GradCheck::Checked(e) => {
                checked += 1;
                worst = worst.max(e);
            }
            GradCheck::Skipped => skipped += 1,
        }
        ensure(skipped < 10_000, || "nearly every instance sits on a kink".into())?;
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:e}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!("{checked} instances ({skipped} kink skips), worst relative error {worst:.1e}"))
}

fn caes_contract() -> Outcome {
    let mut rng = common::rng(3);
    let config = CaesConfig::default();
    for k in 0..500 {
        let curve = common::random_score_curve(&mut rng);
        let scores = ScoreSeries::from_fused(&curve).map_err(|e| e.to_string())?;
        let out = caes(&scores, &config).map_err(|e| e.to_string())?;
        common::check_caes_contract(&scores, &out, &config).map_err(|m| format!("curve {k}: {m}"))?;
    }
    let bump = ScoreSeries::from_fused(&common::single_bump_curve()).map_err(|e| e.to_string())?;
    let out = caes(&bump, &config).map_err(|e| e.to_string())?;
    let counts = [SegmentTag::Pre, SegmentTag::On, SegmentTag::Post].map(|t| out.keyframes.count(t));
    ensure(counts == [4, 8, 4], || format!("single bump tagged {counts:?}"))?;
    Ok("500 random curves; single bump tagged 4 pre + 8 on + 4 post".into())
}

fn volatility_oracle() -> Outcome {
    let mut rng = common::rng(4);
    for k in 0..200 {
        let (a, ida) = common::random_tracked_frame(&mut rng, 0, 4);
        let (b, idb) = common::random_tracked_frame(&mut rng, 1, 4);
        let before = relations_by_pair(&a, &ida).map_err(|e| e.to_string())?;
        let after = relations_by_pair(&b, &idb).map_err(|e| e.to_string())?;
        let got = frame_volatility(&before, &after).map_err(|e| e.to_string())?;
        let want = common::brute_force_volatility(&a, &ida, &b, &idb);
        ensure(got == want, || format!("frame pair {k}: {got:?} vs {want:?}"))?;
    }
    let mut worst = 0.0f64;
    for sigma in [1.0, 2.0, 3.0] {
        for len in [1usize, 5, 13, 40, 200] {
            let curve: Vec<f64> = (0..len).map(|t| ((t * 37 % 17) as f64).sin() * 3.0).collect();
            let got = gaussian_smooth(&curve, sigma).map_err(|e| e.to_string())?;
            for (g, w) in got.iter().zip(common::direct_smooth(&curve, sigma)) {
                worst = worst.max((g - w).abs());
            }
        }
    }
    ensure(worst <= 1e-9, || format!("smoothing deviates by {worst:e}"))?;
    Ok(format!("200 frame pairs exact; smoothing max deviation {worst:.1e}"))
}

fn mining_correctness() -> Outcome {
    let spec = CorpusSpec {
        noise_std: 0.0,
        seed: 5,
        ..CorpusSpec::default()
    };
    let (bundles, truths): (Vec<_>, Vec<_>) = corpus_specs(&spec)
        .iter()
        .map(|s| generate_scenario(s).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .unzip();
    let config = PipelineConfig {
        synthetic: Some(spec.clone()),
        ..PipelineConfig::default()
    };
    let videos = analyze_corpus(&bundles, &config).map_err(|e| e.to_string())?;
    let curves: Vec<VideoCurve<'_>> = videos.iter().map(|v| v.as_curve()).collect();
    let mining = MiningConfig {
        top_k_percent: 100.0,
        ..MiningConfig::default()
    };
    let samples = mine_samples(&curves, &mining, 5).map_err(|e| e.to_string())?;
    let mut got: Vec<(String, usize)> = Vec::new();
    for s in samples.iter().filter(|s| s.label == Label::Positive) {
        let truth = truths.iter().find(|t| t.video_id == s.source.video_id).unwrap();
        let hits: Vec<usize> = truth
            .positive_transitions
            .iter()
            .filter(|e| s.source.frame_before < e.transition && e.transition <= s.source.frame_after)
            .map(|e| e.transition)
            .collect();
        ensure(hits.len() == 1, || format!("{:?} spans {} injected events", s.source, hits.len()))?;
        got.push((s.source.video_id.clone(), hits[0]));
    }
    let mut want: Vec<(String, usize)> = truths
        .iter()
        .flat_map(|t| t.positive_transitions.iter().map(move |e| (t.video_id.clone(), e.transition)))
        .collect();
    got.sort();
    want.sort();
    ensure(got == want, || format!("mined {} positives, injected {}", got.len(), want.len()))?;

    let normal_curves: Vec<VideoCurve<'_>> = curves.iter().copied().filter(|c| c.is_normal).collect();
    let none = select_positives(&normal_curves, &mining).map_err(|e| e.to_string())?;
    ensure(none.is_empty(), || format!("{} positives from normal videos", none.len()))?;
    Ok(format!("{} injected events mined exactly; normal-only corpus gives 0", want.len()))
}

fn default_corpus_config(out: &std::path::Path) -> PipelineConfig {
    PipelineConfig {
        synthetic: Some(CorpusSpec::default()),
        output: out.to_path_buf(),
        seed: 0,
        ..PipelineConfig::default()
    }
}

fn end_to_end(tmp: &std::path::Path) -> Outcome {
    let start = Instant::now();
    let report = run_pipeline(&default_corpus_config(&tmp.join("run_a"))).map_err(|e| e.to_string())?;
    within(start.elapsed(), 300.0)?;
    let sep = report.separation.unwrap_or(f64::NAN);
    ensure(sep >= 0.90, || format!("held-out separation {sep}"))?;
    Ok(format!(
        "20 videos x 200 frames, separation {sep:.3} on held-out pairs, {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

fn ablation_shape() -> Outcome {
    let spec = CorpusSpec::default();
    let bundles = corpus_specs(&spec)
        .iter()
        .map(|s| generate_scenario(s).map(|(b, _)| b).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let config = PipelineConfig {
        synthetic: Some(spec),
        ..PipelineConfig::default()
    };
    let videos = analyze_corpus(&bundles, &config).map_err(|e| e.to_string())?;
    let (sigmas, topks) = ([1.0, 2.0, 3.0], [3.0, 5.0, 7.0]);
    let grid = || {
        ablation_grid(&videos, &sigmas, &topks, &config.mining, &config.train, config.holdout_fraction, 7)
            .map_err(|e| e.to_string())
    };
    let (a, b) = (grid()?, grid()?);
    ensure(a == b, || "two runs with the same seed differ".into())?;
    ensure(a.auc.len() == 3 && a.auc.iter().all(|r| r.len() == 3), || "grid is not 3x3".into())?;
    ensure(a.sigmas == sigmas && a.topks == topks, || "grid axes differ from the request".into())?;
    ensure(a.auc.iter().flatten().all(|v| (0.0..=100.0).contains(v)), || "AUC outside [0, 100]".into())?;
    ensure(a.to_csv().lines().count() == 10, || "CSV does not have 9 rows".into())?;
    let cells: Vec<String> = a.auc.iter().map(|r| format!("{r:?}")).collect();
    Ok(format!("3x3 grid, identical across reruns: {}", cells.join(" ")))
}

fn auc_oracle() -> Outcome {
    let mut rng = common::rng(8);
    use rand::Rng;
    let mut cases = 0;
    for n in 2..=200usize {
        for _ in 0..3 {
            let coarse = rng.random_bool(0.5);
            let scores: Vec<f64> = (0..n)
                .map(|_| if coarse { rng.random_range(0..6) as f64 } else { rng.random_range(-1.0..1.0) })
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let got = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
            let want = common::pairwise_auc(&scores, &labels);
            ensure(got == want, || format!("n = {n}: {got} vs {want}"))?;
            cases += 1;
        }
    }
    let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
    let perfect: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    ensure(roc_auc(&perfect, &labels).ok() == Some(1.0), || "perfect ranking is not 1.0".into())?;
    ensure(roc_auc(&[0.3; 40], &labels).ok() == Some(0.5), || "all-tied scores are not 0.5".into())?;
    Ok(format!("{cases} inputs with n <= 200 equal the pairwise statistic; perfect 1.0, tied 0.5"))
}

fn determinism(tmp: &std::path::Path) -> Outcome {
    // `run_a` was written by the end-to-end criterion; rerun into `run_b`.
    run_pipeline(&default_corpus_config(&tmp.join("run_b"))).map_err(|e| e.to_string())?;
    let mut a = common::dir_bytes(&tmp.join("run_a"));
    let mut b = common::dir_bytes(&tmp.join("run_b"));
    a.remove(TIMINGS_FILE);
    b.remove(TIMINGS_FILE);
    ensure(a.keys().eq(b.keys()), || "different file sets".into())?;
    for (name, bytes) in &a {
        ensure(bytes == &b[name], || format!("{name} differs"))?;
    }
    Ok(format!("{} files byte-identical (wall-clock timings excluded)", a.len()))
}

fn ingest_round_trip(tmp: &std::path::Path) -> Outcome {
    let mut rng = common::rng(10);
    for i in 0..100 {
        let spec = common::random_scenario(&mut rng, i);
        let (bundle, _) = generate_scenario(&spec).map_err(|e| e.to_string())?;
        let first = tmp.join(format!("rt/{i}/a"));
        let second = tmp.join(format!("rt/{i}/b"));
        write_bundle(&bundle, &first).map_err(|e| e.to_string())?;
        let loaded = load_bundle(&first).map_err(|e| e.to_string())?;
        write_bundle(&loaded, &second).map_err(|e| e.to_string())?;
        ensure(common::dir_bytes(&first) == common::dir_bytes(&second), || format!("bundle {i} changed"))?;
    }
    Ok("100 bundles bit-identical after write, load, write".into())
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Check)> = vec![
        ("assignment oracle", Box::new(assignment_oracle)),
        ("gradient check", Box::new(gradient_check)),
        ("keyframe sampling contract", Box::new(caes_contract)),
        ("volatility oracle", Box::new(volatility_oracle)),
        ("mining correctness", Box::new(mining_correctness)),
        ("end-to-end separation", Box::new(|| end_to_end(tmp.path()))),
        ("ablation harness shape", Box::new(ablation_shape)),
        ("AUC oracle", Box::new(auc_oracle)),
        ("determinism", Box::new(|| determinism(tmp.path()))),
        ("ingest round trip", Box::new(|| ingest_round_trip(tmp.path()))),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", k + 1);
            }
        }
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
