//! Fast self-check suites runnable from the command line. Each suite
//! re-derives expected values independently of the code under test and
//! reports one pass/fail line per check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::densedata::{self, GenConfig, Vocab};
use crate::mask::{build_stream_mask, verify_temporal_integrity};
use crate::model::{CrossMode, Frame, IncrementalState, Model, ModelConfig, TimedToken};
use crate::rope3d::{apply_rope3d, Position3D, RopeLayout};
use crate::stream::{decode_offline_oracle, decode_streaming, DecodeOptions, ScheduleProducer};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub const SUITES: &[&str] = &["mask", "rope", "equivalence", "gates", "cache", "grads", "data"];

pub fn run_suite(name: &str, seed: u64) -> Option<Vec<CheckResult>> {
    match name {
        "mask" => Some(mask_suite(seed)),
        "rope" => Some(rope_suite(seed)),
        "equivalence" => Some(equivalence_suite(seed)),
        "gates" => Some(gates_suite(seed)),
        "cache" => Some(cache_suite(seed)),
        "grads" => Some(grads_suite(seed)),
        "data" => Some(data_suite(seed)),
        _ => None,
    }
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn mask_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let mut integrity_fail = 0usize;
    for _ in 0..200 {
        let nt = rng.gen_range(1..12);
        let nf = rng.gen_range(0..12);
        let tt: Vec<f64> = (0..nt).map(|_| rng.gen_range(0.0..20.0f64).round()).collect();
        let ft: Vec<f64> = (0..nf).map(|_| rng.gen_range(0.0..20.0f64).round()).collect();
        let m = build_stream_mask(&tt, &ft);
        for (i, &t) in tt.iter().enumerate() {
            for (j, &f) in ft.iter().enumerate() {
                if m.allowed.get(i, j) != (f <= t) {
                    mismatches += 1;
                }
            }
        }
        if !verify_temporal_integrity(&m, &tt, &ft).passed() {
            integrity_fail += 1;
        }
    }
    vec![
        check(
            "mask matches brute-force oracle",
            mismatches == 0,
            format!("{mismatches} cell mismatches over 200 instances"),
        ),
        check(
            "temporal integrity audit",
            integrity_fail == 0,
            format!("{integrity_fail} failing instances"),
        ),
    ]
}

fn rope_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = RopeLayout::new(48).unwrap();
    let mut max_norm = 0.0f64;
    let mut max_rel = 0.0f64;
    for _ in 0..300 {
        let mut v: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let p = Position3D {
            t: rng.gen_range(0.0..100.0),
            h: rng.gen_range(0..32),
            w: rng.gen_range(0..32),
        };
        apply_rope3d(&mut v, p, &layout, false).unwrap();
        let norm1: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        max_norm = max_norm.max((norm1 - norm0).abs());

        // relative identity: <R(p)q, R(p')k> depends only on p - p'
        let q: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pa = Position3D { t: rng.gen_range(0.0..50.0), h: rng.gen_range(0..16), w: rng.gen_range(0..16) };
        let pb = Position3D { t: rng.gen_range(0.0..50.0), h: rng.gen_range(0..16), w: rng.gen_range(0..16) };
        let shift = rng.gen_range(0.0..20.0);
        let hs = rng.gen_range(0..8);
        let ws = rng.gen_range(0..8);
        let pa2 = Position3D { t: pa.t + shift, h: pa.h + hs, w: pa.w + ws };
        let pb2 = Position3D { t: pb.t + shift, h: pb.h + hs, w: pb.w + ws };
        let dot = |qp: Position3D, kp: Position3D| {
            let mut qq = q.clone();
            let mut kk = k.clone();
            apply_rope3d(&mut qq, qp, &layout, false).unwrap();
            apply_rope3d(&mut kk, kp, &layout, false).unwrap();
            qq.iter().zip(kk.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        max_rel = max_rel.max((dot(pa, pb) - dot(pa2, pb2)).abs());
    }
    vec![
        check(
            "rotation preserves norms",
            max_norm <= 1e-10,
            format!("max |delta| = {max_norm:.3e}"),
        ),
        check(
            "attention depends only on relative position",
            max_rel <= 1e-9,
            format!("max |delta| = {max_rel:.3e}"),
        ),
    ]
}

fn tiny_model(seed: u64) -> Model<f64> {
    Model::init(ModelConfig::tiny(24), seed).unwrap()
}

fn equivalence_suite(seed: u64) -> Vec<CheckResult> {
    let model = tiny_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let mut worst = 0.0f64;
    let mut token_mismatch = 0usize;
    for _ in 0..10 {
        let n = rng.gen_range(0..10);
        let mut t = 0.0f64;
        let sched: Vec<(Frame, f64)> = (0..n)
            .map(|_| {
                t += rng.gen_range(0.25..2.0);
                (Frame::Symbolic(rng.gen_range(0..8u32)), t)
            })
            .collect();
        let t_q = rng.gen_range(0.0..6.0);
        let opts = DecodeOptions {
            max_tokens: 5,
            eos: 999,
            ..Default::default()
        };
        let q = [10u32, 11, 12];
        let a = decode_streaming(&model, &q, t_q, &mut ScheduleProducer::new(sched.clone()), &opts).unwrap();
        let b = decode_offline_oracle(&model, &q, t_q, &sched, &opts).unwrap();
        if a.tokens != b.tokens {
            token_mismatch += 1;
        }
        for (la, lb) in a.step_logits.iter().zip(b.step_logits.iter()) {
            for (x, y) in la.iter().zip(lb.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    vec![
        check(
            "streaming tokens equal offline recomputation",
            token_mismatch == 0,
            format!("{token_mismatch} mismatching schedules of 10"),
        ),
        check(
            "per-step logit gap within 1e-5",
            worst <= 1e-5,
            format!("max gap {worst:.3e}"),
        ),
    ]
}

fn gates_suite(seed: u64) -> Vec<CheckResult> {
    let mut model = tiny_model(seed);
    model.zero_gates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAA);
    let mut mismatch = 0usize;
    for _ in 0..10 {
        let text: Vec<TimedToken> = (0..6)
            .map(|i| TimedToken {
                id: rng.gen_range(0..24),
                time: i as f64,
            })
            .collect();
        let frames: Vec<_> = (0..3)
            .map(|t| model.encode_frame(&Frame::Symbolic(rng.gen_range(0..8)), t as f64).unwrap())
            .collect();
        let a = model.forward(&text, &frames).unwrap();
        let b = model.text_only_forward(&text).unwrap();
        if a.data != b.data {
            mismatch += 1;
        }
    }
    vec![check(
        "zeroed gates reproduce the text-only decoder bit-for-bit",
        mismatch == 0,
        format!("{mismatch} mismatching inputs of 10"),
    )]
}

fn cache_suite(seed: u64) -> Vec<CheckResult> {
    let model = tiny_model(seed);
    let frames = [
        (Frame::Symbolic(2), 0.0),
        (Frame::Symbolic(5), 1.0),
    ];
    let cached: Vec<_> = frames
        .iter()
        .enumerate()
        .map(|(i, (f, t))| model.cache_frame(f, *t, i as u64).unwrap())
        .collect();
    let mut cache_ok = true;
    for (i, (f, t)) in frames.iter().enumerate() {
        let again = model.cache_frame(f, *t, i as u64).unwrap();
        for (a, b) in cached[i].stages.iter().zip(again.stages.iter()) {
            if a.data != b.data {
                cache_ok = false;
            }
        }
    }
    let refs: Vec<_> = cached.iter().collect();
    let text: Vec<TimedToken> = (0..5)
        .map(|i| TimedToken { id: 10 + i, time: 2.0 + i as f64 })
        .collect();
    let mut st = IncrementalState::new(&model.cfg);
    let mut incr_rows = Vec::new();
    for tok in &text {
        incr_rows.push(model.incr_step(&mut st, *tok, &refs, CrossMode::Normal).unwrap());
    }
    let encoded: Vec<_> = frames
        .iter()
        .map(|(f, t)| model.encode_frame(f, *t).unwrap())
        .collect();
    let batch = model.forward(&text, &encoded).unwrap();
    let mut incr_ok = true;
    for (i, row) in incr_rows.iter().enumerate() {
        if row != &batch.row(i).to_vec() {
            incr_ok = false;
        }
    }
    // a frame strictly after every text timestamp must change nothing
    let mut future = encoded.clone();
    future.push(model.encode_frame(&Frame::Symbolic(7), 100.0).unwrap());
    let with_future = model.forward(&text, &future).unwrap();
    vec![
        check(
            "frame cache entries equal fresh recomputation",
            cache_ok,
            "bitwise comparison over all stages".into(),
        ),
        check(
            "incremental rows equal batch forward bit-for-bit",
            incr_ok,
            "5 text rows".into(),
        ),
        check(
            "future frames leave logits untouched",
            with_future.data == batch.data,
            "frame at t=100 vs text ending t=6".into(),
        ),
    ]
}

fn grads_suite(seed: u64) -> Vec<CheckResult> {
    let mut model = tiny_model(seed);
    let text: Vec<TimedToken> = (0..6)
        .map(|i| TimedToken { id: (i * 3 % 24) as u32, time: i as f64 })
        .collect();
    let frames = vec![(Frame::Symbolic(3), 0.0), (Frame::Symbolic(1), 2.0)];
    let targets: Vec<u32> = (0..6).map(|i| (i * 5 % 24) as u32).collect();
    let mask = vec![false, true, true, true, true, true];
    model.store.zero_grads();
    model.loss_and_grad(&text, &frames, &targets, &mask).unwrap();
    let cfg = model.cfg.clone();
    let ids = model.ids.clone();
    let vp = model.frozen.vision_proj.clone();
    let st = model.frozen.symbol_table.clone();
    let all = model.all_param_ids();
    let report = crate::numkit::grad_check(
        &mut model.store,
        &all,
        |store| {
            crate::model::eval_loss(&cfg, &ids, &vp, &st, store, &text, &frames, &targets, &mask)
                .map_err(|e| crate::numkit::NumError::NonFinite { what: e.to_string() })
        },
        1e-5,
        Some(2),
    )
    .unwrap();
    vec![check(
        "analytic gradients match central differences",
        report.max_rel_err <= 1e-4,
        format!("max rel err {:.3e} over {} entries", report.max_rel_err, report.checked),
    )]
}

fn data_suite(seed: u64) -> Vec<CheckResult> {
    let vocab = Vocab::new();
    let cfg = GenConfig {
        n_items: 100,
        ..Default::default()
    };
    let a = densedata::generate(&cfg, seed).unwrap();
    let b = densedata::generate(&cfg, seed).unwrap();
    let mut verify_fail = 0usize;
    let mut integrity_fail = 0usize;
    for item in &a {
        if densedata::verify_item(&vocab, item).is_err() {
            verify_fail += 1;
        }
        let ti = densedata::compile_item(&vocab, item, 1.0, 32).unwrap();
        let tt: Vec<f64> = ti.inputs.iter().map(|t| t.time).collect();
        let ft: Vec<f64> = ti.frames.iter().map(|(_, t)| *t).collect();
        let m = build_stream_mask(&tt, &ft);
        if !verify_temporal_integrity(&m, &tt, &ft).passed() {
            integrity_fail += 1;
        }
    }
    let dir = std::env::temp_dir().join(format!("streamlm-verify-{seed}"));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("corpus.jsonl");
    densedata::save_corpus(&path, seed, &a).unwrap();
    let reloaded = densedata::load_corpus(&path).unwrap();
    let _ = std::fs::remove_dir_all(&dir);
    vec![
        check(
            "generation is deterministic",
            a == b,
            "same seed, two runs".into(),
        ),
        check(
            "every item internally consistent",
            verify_fail == 0,
            format!("{verify_fail} failing items of 100"),
        ),
        check(
            "compiled masks pass the integrity audit",
            integrity_fail == 0,
            format!("{integrity_fail} failing items of 100"),
        ),
        check(
            "corpus round-trip identity",
            reloaded == a,
            "write then read".into(),
        ),
    ]
}
