//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use hierclip::data::{Dataset, SyntheticFrameRef};
use hierclip::encoders::{aggregate_video, Embedding, EncoderBundle, QueryEncoder, QuerySpec};
use hierclip::eval::{
    build_prompts, cataract1k_instrument_templates, cataract1k_phase_templates,
    multi_label_metrics, single_label_metrics, zero_shot_classify, Mode, Predictions, PromptStyle,
    ZeroShotConfig,
};
use hierclip::frames::clip_frames;
use hierclip::losses::{
    clip_vl_loss, clip_vv_loss, video_narrative_loss, video_silent_loss, LossConfig, RetrievedSet,
};
use hierclip::memory_bank::MemoryBank;
use hierclip::persist::Checkpoint;
use hierclip::trainer::{
    alternating_schedule, checkpoint_path, read_metrics, run_pretraining, RunSummary, Stage,
    TrainConfig, Trainer, METRICS_FILE,
};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("took {elapsed:?}, limit {limit:?}"),
    )
}

/// Reference schedule at desk sizes on the fixture, shared by several
/// criteria.
struct FullRun {
    _dir: tempfile::TempDir,
    cfg: TrainConfig,
    summary: RunSummary,
    query_before: Vec<hierclip::persist::NamedArray>,
}

fn full_run() -> &'static FullRun {
    static RUN: OnceLock<FullRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = desk_config();
        let query_before = EncoderBundle::new(cfg.encoder()).unwrap().query_arrays();
        let dir = tempfile::tempdir().unwrap();
        let summary = run_pretraining(&fixture(), &cfg, dir.path(), false).unwrap();
        FullRun {
            _dir: dir,
            cfg,
            summary,
            query_before,
        }
    })
}

// 1
fn loss_identities() -> Check {
    let start = Instant::now();
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for b in [1usize, 2, 4, 8] {
        let row = random_unit(&mut rng, 16);
        let m = Array2::from_shape_fn((b, 16), |(_, j)| row[j]);
        let expected = if b == 1 { 0.0 } else { (b as f64).ln() };
        let tol = if b == 1 { 1e-9 } else { 1e-6 };
        for (name, v) in [
            (
                "clip_vl",
                clip_vl_loss(m.view(), m.view(), &cfg).unwrap().value,
            ),
            (
                "clip_vv",
                clip_vv_loss(m.view(), m.view(), &cfg).unwrap().value,
            ),
            (
                "video_narrative",
                video_narrative_loss(m.view(), m.view(), &cfg)
                    .unwrap()
                    .value,
            ),
        ] {
            ensure(
                (v - expected).abs() <= tol,
                format!("{name} B={b}: {v} vs {expected}"),
            )?;
            worst = worst.max((v - expected).abs());
        }
    }
    let row = random_unit(&mut rng, 16);
    let m = Array2::from_shape_fn((2, 16), |(_, j)| row[j]);
    let one = Array2::from_shape_fn((1, 16), |(_, j)| row[j]);
    let set = RetrievedSet {
        visual: one.clone(),
        text: one,
    };
    let silent = video_silent_loss(m.view(), &[set.clone(), set], &cfg)
        .unwrap()
        .value;
    ensure(
        (silent - 2f64.ln()).abs() <= 1e-6,
        format!("silent {silent} vs ln 2"),
    )?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("max deviation {worst:.1e}, silent {silent:.9}"))
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Five-point central difference at step `h = 1e-4`.
fn fd_check(
    f: &dyn Fn(&[Array2<f64>]) -> f64,
    inputs: &[Array2<f64>],
    grads: &[Array2<f64>],
) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (t, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let orig = xs[t][[r, c]];
            let mut at = |delta: f64| {
                xs[t][[r, c]] = orig + delta;
                f(&xs)
            };
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            xs[t][[r, c]] = orig;
            worst = worst.max(rel_err(g[[r, c]], numeric));
        }
    }
    worst
}

// 2
fn gradient_checks() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    type PairFn = fn(
        ArrayView2<f64>,
        ArrayView2<f64>,
        &LossConfig,
    ) -> hierclip::Result<hierclip::losses::PairLoss>;
    let pairs: [(&str, PairFn); 3] = [
        ("clip_vl", clip_vl_loss),
        ("clip_vv", clip_vv_loss),
        ("video_narrative", video_narrative_loss),
    ];
    for trial in 0..20 {
        let b = rng.gen_range(1..=8);
        let d = rng.gen_range(2..=16);
        let cfg = LossConfig {
            symmetric: trial % 2 == 0,
            ..LossConfig::default()
        };
        for (name, loss) in pairs {
            let a = random_unit_rows(&mut rng, b, d);
            let t = random_unit_rows(&mut rng, b, d);
            let out = loss(a.view(), t.view(), &cfg).unwrap();
            let f = |xs: &[Array2<f64>]| loss(xs[0].view(), xs[1].view(), &cfg).unwrap().value;
            let e = fd_check(&f, &[a, t], &[out.grad_a, out.grad_b]);
            ensure(e < 1e-4, format!("{name} trial {trial}: rel err {e:.2e}"))?;
            worst = worst.max(e);
        }
        let k = rng.gen_range(1..=3);
        let video = random_unit_rows(&mut rng, b, d);
        let mut inputs = vec![video];
        for _ in 0..b {
            inputs.push(random_unit_rows(&mut rng, k, d));
            inputs.push(random_unit_rows(&mut rng, k, d));
        }
        let silent = |xs: &[Array2<f64>]| {
            let sets: Vec<RetrievedSet> = (0..b)
                .map(|i| RetrievedSet {
                    visual: xs[1 + 2 * i].clone(),
                    text: xs[2 + 2 * i].clone(),
                })
                .collect();
            video_silent_loss(xs[0].view(), &sets, &cfg).unwrap()
        };
        let out = silent(&inputs);
        let mut grads = vec![out.grad_video];
        for set in out.grad_retrieved {
            grads.push(set.visual);
            grads.push(set.text);
        }
        let e = fd_check(&|xs| silent(xs).value, &inputs, &grads);
        ensure(
            e < 1e-4,
            format!("video_silent trial {trial}: rel err {e:.2e}"),
        )?;
        worst = worst.max(e);
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("max relative error {worst:.2e}"))
}

// 3
fn retrieval_exactness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = QuerySpec {
        dim: 32,
        buckets: 64,
        text_len: 77,
        seed: 0,
    };
    let mut bank = MemoryBank::empty(4, spec);
    let mut keys: Vec<(String, Vec<f64>)> = Vec::new();
    let mut order: Vec<usize> = (0..1000).collect();
    order.shuffle(&mut rng);
    for &i in &order {
        // every fifth entry duplicates an earlier key to create exact ties
        let key = if i % 5 == 4 && !keys.is_empty() {
            keys[rng.gen_range(0..keys.len())].1.clone()
        } else {
            random_unit(&mut rng, 32).to_vec()
        };
        let id = format!("e{i:04}");
        bank.insert(
            &id,
            Embedding::from_unit(key.clone().into()).unwrap(),
            Embedding::from_unit(random_unit(&mut rng, 4)).unwrap(),
            Embedding::from_unit(random_unit(&mut rng, 4)).unwrap(),
        )
        .unwrap();
        keys.push((id, key));
    }
    let mut tied = 0;
    for q in 0..100 {
        let query = if q % 4 == 0 {
            // a stored key as query maximises tie pressure at the top
            keys[rng.gen_range(0..keys.len())].1.clone()
        } else {
            random_unit(&mut rng, 32).to_vec()
        };
        let mut scored: Vec<(f64, &str)> = keys
            .iter()
            .map(|(id, key)| (dot(&query, key), id.as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        for k in [1usize, 5, 50] {
            let got = bank.retrieve(ndarray::ArrayView1::from(&query), k).unwrap();
            let expected: Vec<&str> = scored[..k].iter().map(|s| s.1).collect();
            ensure(
                got.ids() == expected,
                format!("query {q} k={k}: {:?} vs {:?}", got.ids(), expected),
            )?;
            if scored[..k].windows(2).any(|w| w[0].0 == w[1].0) {
                tied += 1;
            }
        }
    }
    ensure(tied > 0, "no ties exercised")?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("300 retrievals exact, {tied} with tied scores"))
}

// 4
fn schedule_conformance() -> Check {
    let cfg = TrainConfig::default();
    let labels = alternating_schedule(&cfg).map_err(|e| e.to_string())?;
    let expected: String = "C".repeat(40) + &"CCCVV".repeat(4);
    let got: String = labels
        .iter()
        .map(|l| if l.stage == Stage::Clip { 'C' } else { 'V' })
        .collect();
    ensure(got == expected, format!("pattern {got}"))?;
    ensure(
        labels.iter().enumerate().all(|(i, l)| l.epoch == i + 1),
        "epochs not 1..=60",
    )?;
    let clip = got.matches('C').count();
    ensure(
        clip == 52 && got.len() - clip == 8,
        "counts differ from 52/8",
    )?;

    let run = full_run();
    let logged = read_metrics(&run.summary.metrics).map_err(|e| e.to_string())?;
    ensure(
        logged.len() == 60,
        format!("{} metric records", logged.len()),
    )?;
    for (l, r) in alternating_schedule(&run.cfg).unwrap().iter().zip(&logged) {
        ensure(
            l.epoch == r.epoch && l.stage == r.stage,
            format!("epoch {} logged as {:?}", l.epoch, r.stage),
        )?;
    }
    Ok("60 labels (52 CLIP / 8 VIDEO), metrics log matches".into())
}

// 5
fn desk_learning() -> Check {
    let start = Instant::now();
    let ds = fixture();
    let pairs = pair_set(&ds);
    let cfg = desk_config();
    let mut trainer = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    let clips = ds.narrated_clips();
    let mut steps = 0;
    let mut reached = None;
    'outer: for epoch in 1.. {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch);
        let mut order = clips.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_clip) {
            trainer
                .train_step_clip(batch, cfg.lr, &mut rng)
                .map_err(|e| e.to_string())?;
            steps += 1;
            if trainer.clip_text_top1(&pairs).unwrap() == 1.0 {
                reached = Some(steps);
                break 'outer;
            }
            if steps == 300 {
                break 'outer;
            }
        }
    }
    let reached = reached.ok_or("clip->narration top-1 below 1.0 after 300 steps")?;

    let run = full_run();
    let ck = Checkpoint::load(&run.summary.checkpoint).map_err(|e| e.to_string())?;
    let trained = Trainer::from_checkpoint(&ck).map_err(|e| e.to_string())?;
    let videos = ds.narrative_videos();
    let top1 = trained.video_title_top1(&ds, &videos).unwrap();
    ensure(top1 == 1.0, format!("video->title top-1 {top1}"))?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "clip->narration 1.0 after {reached} steps, video->title {top1}"
    ))
}

fn concept_of(ds: &Dataset, video_id: &str) -> usize {
    let video = ds.video(video_id).unwrap();
    let clip = ds.clip(&video.clip_ids[0]).unwrap();
    SyntheticFrameRef::parse(&clip.frames[0]).unwrap().concept
}

// 6
fn retrieval_signal() -> Check {
    let ds = fixture();
    let narrative = ds.narrative_videos();
    let mut wins = 0;
    let mut gaps = Vec::new();
    for seed in 0..10u64 {
        let cfg = TrainConfig {
            seed,
            ..quick_config(4, 4)
        };
        let mut trainer = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clips = ds.narrated_clips();
        for batch in clips.chunks(cfg.batch_clip) {
            trainer.train_step_clip(batch, cfg.lr, &mut rng).unwrap();
        }
        let bank = trainer.build_bank(&ds).unwrap();
        let concepts: Vec<usize> = bank
            .entries()
            .iter()
            .map(|e| concept_of(&ds, e.entry_id()))
            .collect();
        // derangement over concepts: entry i takes the values of a silent
        // video of a different concept
        let shift = rng.gen_range(1..4);
        let perm: Vec<usize> = concepts
            .iter()
            .map(|&c| concepts.iter().position(|&o| o == (c + shift) % 4).unwrap())
            .collect();
        let shuffled = bank.permute_values(&perm).unwrap();
        let matched = trainer
            .evaluate_video_loss(&ds, &narrative, &bank)
            .unwrap()
            .silent;
        let other = trainer
            .evaluate_video_loss(&ds, &narrative, &shuffled)
            .unwrap()
            .silent;
        if matched < other {
            wins += 1;
        }
        gaps.push(other - matched);
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    ensure(wins >= 9, format!("matched lower in {wins}/10"))?;
    Ok(format!(
        "matched lower in {wins}/10, mean gap {mean_gap:.4}"
    ))
}

fn one_hot(n: usize, hot: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &h in hot {
        v[h] = 1.0 / (hot.len() as f64).sqrt();
    }
    v
}

// 7
fn zero_shot_oracle() -> Check {
    let phases = cataract1k_phase_templates();
    let labels: Vec<String> = phases.keys().cloned().collect();
    let n = labels.len();
    let set = build_prompts(&labels, PromptStyle::Caption, &phases).unwrap();
    let prompts: Vec<Array2<f64>> = set
        .prompts
        .iter()
        .enumerate()
        .map(|(c, ps)| Array2::from_shape_fn((ps.len(), n), |(_, j)| (j == c) as u8 as f64))
        .collect();
    let truth: Vec<usize> = (0..5 * n).map(|i| i % n).collect();
    let frames = Array2::from_shape_fn((truth.len(), n), |(i, j)| (j == truth[i]) as u8 as f64);
    let out = zero_shot_classify(frames.view(), &prompts, &ZeroShotConfig::default()).unwrap();
    let Predictions::Single(pred) = out.predictions else {
        return Err("expected single-label predictions".into());
    };
    let acc = single_label_metrics(&pred, &truth, n).unwrap().accuracy;
    ensure(acc == 1.0, format!("phase accuracy {acc}"))?;

    let instruments = cataract1k_instrument_templates();
    let m = instruments.len();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let present: Vec<Vec<usize>> = (0..60)
        .map(|_| {
            let mut all: Vec<usize> = (0..m).collect();
            all.shuffle(&mut rng);
            all.truncate(rng.gen_range(1..=3));
            all
        })
        .collect();
    let frames = Array2::from_shape_vec(
        (present.len(), m),
        present.iter().flat_map(|p| one_hot(m, p)).collect(),
    )
    .unwrap();
    let truth = Array2::from_shape_fn((present.len(), m), |(i, c)| present[i].contains(&c));
    let prompts: Vec<Array2<f64>> = (0..m)
        .map(|c| Array2::from_shape_vec((1, m), one_hot(m, &[c])).unwrap())
        .collect();
    let cfg = ZeroShotConfig {
        mode: Mode::Multi,
        ..ZeroShotConfig::default()
    };
    let out = zero_shot_classify(frames.view(), &prompts, &cfg).unwrap();
    let Predictions::Multi(decisions) = out.predictions else {
        return Err("expected multi-label predictions".into());
    };
    let oracle = multi_label_metrics(&decisions, &out.scores, &truth).unwrap();
    ensure(
        oracle.fpr == 0.0 && oracle.map == 1.0,
        format!("oracle fpr {} map {}", oracle.fpr, oracle.map),
    )?;
    let all_pos = Array2::from_elem(truth.raw_dim(), true);
    let flat = Array2::from_elem(truth.raw_dim(), 1.0);
    let baseline = multi_label_metrics(&all_pos, &flat, &truth).unwrap();
    ensure(
        baseline.fpr == 1.0,
        format!("all-positive fpr {}", baseline.fpr),
    )?;
    Ok(format!(
        "accuracy 1.0, oracle FPR 0.0 / mAP 1.0, all-positive FPR 1.0 / mAP {:.3}",
        baseline.map
    ))
}

// 8
fn metric_correctness() -> Check {
    let text =
        std::fs::read_to_string(data_path("metric_cases.json")).map_err(|e| e.to_string())?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let cases = doc["cases"].as_array().ok_or("no cases")?;
    let usizes = |v: &Value| -> Vec<usize> {
        v.as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_u64().unwrap() as usize)
            .collect()
    };
    let matrix = |v: &Value| -> Vec<Vec<Value>> {
        v.as_array()
            .unwrap()
            .iter()
            .map(|r| r.as_array().unwrap().clone())
            .collect()
    };
    for case in cases {
        let name = case["name"].as_str().unwrap();
        let s = &case["single"];
        let got = single_label_metrics(
            &usizes(&s["predictions"]),
            &usizes(&s["truth"]),
            s["n_classes"].as_u64().unwrap() as usize,
        )
        .unwrap();
        for (label, g, e) in [
            ("accuracy", got.accuracy, s["accuracy"].as_f64().unwrap()),
            ("macro_f1", got.macro_f1, s["macro_f1"].as_f64().unwrap()),
        ] {
            ensure((g - e).abs() <= 1e-9, format!("{name} {label}: {g} vs {e}"))?;
        }
        let mm = &case["multi"];
        let t = matrix(&mm["truth"]);
        let (rows, cols) = (t.len(), t[0].len());
        let truth = Array2::from_shape_fn((rows, cols), |(i, j)| t[i][j].as_bool().unwrap());
        let d = matrix(&mm["decisions"]);
        let decisions = Array2::from_shape_fn((rows, cols), |(i, j)| d[i][j].as_bool().unwrap());
        let sc = matrix(&mm["scores"]);
        let scores = Array2::from_shape_fn((rows, cols), |(i, j)| sc[i][j].as_f64().unwrap());
        let got = multi_label_metrics(&decisions, &scores, &truth).unwrap();
        for (label, g, e) in [
            ("fpr", got.fpr, mm["fpr"].as_f64().unwrap()),
            ("map", got.map, mm["map"].as_f64().unwrap()),
        ] {
            ensure((g - e).abs() <= 1e-9, format!("{name} {label}: {g} vs {e}"))?;
        }
    }
    Ok(format!("{} fixtures match", cases.len()))
}

fn max_abs_diff(a: &Embedding, b: &Embedding) -> f64 {
    (a.as_array() - b.as_array())
        .iter()
        .fold(0.0, |m, x| m.max(x.abs()))
}

// 9
fn invariances() -> Check {
    let ds = fixture();
    let cfg = quick_config(2, 2);
    let encoders = EncoderBundle::new(cfg.encoder()).unwrap();
    let store = hierclip::frames::FrameStore::new(cfg.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for clip in ds.clips().take(6) {
        let mut frames = clip_frames(&store, clip, cfg.n_frames).unwrap();
        let base = encoders.encode_clip(&frames).unwrap();
        frames.shuffle(&mut rng);
        worst = worst.max(max_abs_diff(&base, &encoders.encode_clip(&frames).unwrap()));
    }
    for _ in 0..20 {
        let n = rng.gen_range(2..8);
        let mut clips: Vec<Embedding> = (0..n)
            .map(|_| Embedding::from_unit(random_unit(&mut rng, 16)).unwrap())
            .collect();
        let base = aggregate_video(&clips).unwrap();
        clips.shuffle(&mut rng);
        worst = worst.max(max_abs_diff(&base, &aggregate_video(&clips).unwrap()));
    }
    ensure(
        worst <= 1e-12,
        format!("permutation changed embedding by {worst:.1e}"),
    )?;

    for _ in 0..20 {
        let frames = random_unit_rows(&mut rng, 30, 8);
        let prompts: Vec<Array2<f64>> = (0..5).map(|_| random_unit_rows(&mut rng, 2, 8)).collect();
        let cfg = ZeroShotConfig::default();
        let base = zero_shot_classify(frames.view(), &prompts, &cfg)
            .unwrap()
            .predictions;
        let scale = rng.gen_range(0.01..100.0);
        let scaled = frames.mapv(|x| x * scale);
        let other = zero_shot_classify(scaled.view(), &prompts, &cfg)
            .unwrap()
            .predictions;
        ensure(base == other, format!("argmax changed under scale {scale}"))?;
    }

    let run = full_run();
    let ck = Checkpoint::load(&run.summary.checkpoint).map_err(|e| e.to_string())?;
    for before in &run.query_before {
        let after = ck
            .array(&before.name)
            .ok_or(format!("{} missing", before.name))?;
        let same = after.shape == before.shape
            && after
                .data
                .iter()
                .zip(&before.data)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("{} changed during training", before.name))?;
    }
    let bank = MemoryBank::load(run.summary.checkpoint.with_extension("bank")).unwrap();
    let rebuilt = QueryEncoder::new(bank.query_spec());
    let (trained, _) = hierclip::trainer::encoders_from_checkpoint(&ck).unwrap();
    ensure(
        rebuilt == *trained.query(),
        "query encoder rebuilt from bank differs",
    )?;
    Ok(format!(
        "max permutation drift {worst:.1e}, query encoder byte-identical"
    ))
}

fn bits(a: &Checkpoint) -> Vec<u64> {
    a.arrays
        .iter()
        .flat_map(|x| x.data.iter().map(|v| v.to_bits()))
        .collect()
}

// 10
fn persistence() -> Check {
    let ds = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = full_run();
    let ck = Checkpoint::load(&run.summary.checkpoint).unwrap();
    let path = dir.path().join("copy.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    ensure(
        bits(&ck) == bits(&back) && ck == back,
        "checkpoint round trip differs",
    )?;
    ensure(
        back.to_bytes().unwrap() == std::fs::read(&path).unwrap(),
        "checkpoint bytes differ",
    )?;
    let bank = MemoryBank::load(run.summary.checkpoint.with_extension("bank")).unwrap();
    let bank_path = dir.path().join("copy.bank");
    bank.save(&bank_path).unwrap();
    let bank_back = MemoryBank::load(&bank_path).unwrap();
    ensure(
        bank_back.to_bytes() == bank.to_bytes() && bank_back == bank,
        "bank round trip differs",
    )?;

    let cfg = TrainConfig {
        checkpoint_every: 3,
        ..quick_config(7, 2)
    };
    let full_dir = dir.path().join("full");
    let full = run_pretraining(&ds, &cfg, &full_dir, false).map_err(|e| e.to_string())?;
    let resumed_dir = dir.path().join("resumed");
    std::fs::create_dir_all(resumed_dir.join("checkpoints")).unwrap();
    for ext in ["ckpt", "bank"] {
        let src = checkpoint_path(&full_dir, 3).with_extension(ext);
        let dst = checkpoint_path(&resumed_dir, 3).with_extension(ext);
        if src.is_file() {
            std::fs::copy(src, dst).unwrap();
        }
    }
    let head: String = std::fs::read_to_string(full_dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .take(3)
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(resumed_dir.join(METRICS_FILE), head).unwrap();
    let resumed = run_pretraining(&ds, &cfg, &resumed_dir, true).map_err(|e| e.to_string())?;
    ensure(
        resumed.records.len() == full.records.len(),
        "record count differs",
    )?;
    let mut worst: f64 = 0.0;
    for (a, b) in full.records.iter().zip(&resumed.records).skip(3) {
        worst = worst.max((a.mean_loss - b.mean_loss).abs());
    }
    let first = (full.records[3].mean_loss - resumed.records[3].mean_loss).abs();
    ensure(
        first <= 1e-6,
        format!("first post-resume epoch differs by {first:.2e}"),
    )?;
    ensure(
        worst <= 1e-6,
        format!("post-resume trajectory differs by {worst:.2e}"),
    )?;
    ensure(
        has_same_file(&full.checkpoint, &resumed.checkpoint),
        "final checkpoints differ",
    )?;
    Ok(format!("bit-exact round trips, resume drift {worst:.1e}"))
}

fn has_same_file(a: &Path, b: &Path) -> bool {
    match (Checkpoint::load(a), Checkpoint::load(b)) {
        (Ok(x), Ok(y)) => bits(&x) == bits(&y),
        _ => false,
    }
}

fn main() {
    // respect `cargo test -- --list` and name filters
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 10] = [
        ("1 loss identities", loss_identities),
        ("2 gradient checks", gradient_checks),
        ("3 retrieval exactness", retrieval_exactness),
        ("4 schedule conformance", schedule_conformance),
        ("5 desk-scale learning", desk_learning),
        ("6 retrieval-augmentation signal", retrieval_signal),
        ("7 zero-shot oracle", zero_shot_oracle),
        ("8 metric correctness", metric_correctness),
        ("9 invariances", invariances),
        ("10 persistence", persistence),
    ];
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({secs:.2}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({secs:.2}s) {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
