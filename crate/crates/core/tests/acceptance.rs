//! Acceptance criteria 1-8. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;
use s2il::config::ExperimentConfig;
use s2il::distill::{baseline_fd_loss, s2il_loss, s2il_terms, ssim, FdWeights, SsimParams};
use s2il::exemplar::herding_select;
use s2il::metrics::{aia, bt, fgt, oracle_deviation};
use s2il::net::{lsc_loss, FeatureBundle};
use s2il::runner::{run_experiment, Manifest, ORACLE_LABEL};
use s2il::tensor::{finite_difference_check, Tape, Tensor};

const CONFIG: &str = include_str!("../../../configs/acceptance.conf");

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(ok: bool, what: &str, failures: &mut Vec<String>) {
    if !ok {
        failures.push(what.to_string());
    }
}

fn finish(failures: Vec<String>, detail: String) -> Outcome {
    if failures.is_empty() {
        Outcome { pass: true, detail }
    } else {
        Outcome {
            pass: false,
            detail: format!("{detail}; failed: {}", failures.join(", ")),
        }
    }
}

fn random_map(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(4..65);
    let scale = rng.random_range(0.01..5.0);
    let shift = rng.random_range(-2.0..2.0);
    common::uniform(rng, n, -scale, scale).into_iter().map(|x| x + shift).collect()
}

fn flat(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::new(vec![n], v).unwrap()
}

fn ssim_kernel() -> Outcome {
    let p = SsimParams::default();
    let c = [p.c1, p.c2, p.c3];
    let mut rng = common::rng(1);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let u = random_map(&mut rng);
        let mut v = common::uniform(&mut rng, u.len(), -3.0, 3.0);
        if rng.random_bool(0.5) {
            // Correlated partner, so high similarities are exercised too.
            v = u.iter().zip(&v).map(|(a, b)| a + 0.1 * b).collect();
        }
        let (tu, tv) = (flat(u.clone()), flat(v.clone()));
        let same = ssim(&tu, &tu, &p).unwrap();
        let uv = ssim(&tu, &tv, &p).unwrap();
        let vu = ssim(&tv, &tu, &p).unwrap();
        check(same == 1.0, "ssim(u,u) = 1", &mut failures);
        check(uv == vu, "symmetry", &mut failures);
        check((-1.0..=1.0).contains(&uv), "range", &mut failures);
        let reference = common::ssim_scalar(&u, &v, p.p, p.q, p.r, c);
        worst = worst.max((uv - reference).abs());
    }
    check(worst <= 1e-12, "scalar reference", &mut failures);
    failures.dedup();
    finish(failures, format!("max |ssim - reference| = {worst:.2e}"))
}

fn loss_contracts() -> Outcome {
    let mut rng = common::rng(2);
    let mut failures = Vec::new();
    let params = SsimParams::default();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
        let n = 2 * 3 * h * w;
        let cur = Tensor::new(vec![2, 3, h, w], common::uniform(&mut rng, n, -2.0, 2.0)).unwrap();
        let prev = Tensor::new(vec![2, 3, h, w], common::uniform(&mut rng, n, -2.0, 2.0)).unwrap();
        let mut tape = Tape::new();
        let (c, t) = (tape.param(cur), tape.param(prev));
        let terms = s2il_terms(&mut tape, c, t, &params).unwrap();
        for &x in tape.value(terms).data() {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        let loss = s2il_loss(&mut tape, c, t, &params).unwrap();
        let grads = tape.backward(loss).unwrap();
        let teacher_zero = grads.get(t).is_none_or(|g| g.data().iter().all(|&x| x == 0.0));
        check(teacher_zero, "teacher gradient", &mut failures);
    }
    check(lo >= 0.0 && hi <= 1.0, "per-channel terms in [0, 1]", &mut failures);

    for _ in 0..100 {
        let mut tape = Tape::new();
        let mut bundle = |tape: &mut Tape| {
            let a = Tensor::new(vec![2, 3, 4, 4], common::uniform(&mut rng, 96, 0.0, 2.0)).unwrap();
            let b = Tensor::new(vec![2, 5, 2, 2], common::uniform(&mut rng, 40, 0.0, 2.0)).unwrap();
            let (a, b) = (tape.param(a), tape.param(b));
            let pooled = tape.global_avg_pool(b).unwrap();
            FeatureBundle { layers: vec![a, b], pooled, scores: pooled }
        };
        let cur = bundle(&mut tape);
        let prev = bundle(&mut tape);
        let plain = baseline_fd_loss(&mut tape, &cur, &prev, None).unwrap();
        let unit = baseline_fd_loss(&mut tape, &cur, &prev, Some(&FdWeights::ones(&[3, 5]))).unwrap();
        let (a, b) = (tape.value(plain).item().unwrap(), tape.value(unit).item().unwrap());
        check(a.to_bits() == b.to_bits(), "unit weights bitwise equal", &mut failures);
    }
    failures.dedup();
    finish(failures, format!("terms within [{lo:.4}, {hi:.4}]"))
}

fn gradient_suite() -> Outcome {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut rng = common::rng(3);
    let mut failures = Vec::new();
    let mut worst = [0.0f64; 3];
    for _ in 0..50 {
        let teacher = Tensor::new(vec![2, 3, 4, 4], common::uniform(&mut rng, 96, 0.1, 1.5)).unwrap();
        let student = Tensor::new(
            vec![2, 3, 4, 4],
            teacher.data().iter().map(|t| (t + rng.random_range(-0.3..0.3)).abs() + 0.05).collect(),
        )
        .unwrap();
        let r = finite_difference_check(
            |tape, x| {
                let t = tape.constant(teacher.clone());
                s2il_loss(tape, x, t, &SsimParams::default())
            },
            &student,
            STEP,
            TOL,
        )
        .unwrap();
        worst[0] = worst[0].max(r.max_rel_deviation);
        check(r.passed, "s2il_loss", &mut failures);

        let x = Tensor::new(vec![2, 3, 4, 4], common::uniform(&mut rng, 96, -1.0, 1.0)).unwrap();
        let pa = Tensor::new(vec![2, 3, 4, 4], common::uniform(&mut rng, 96, -1.0, 1.0)).unwrap();
        let pb = Tensor::new(vec![2, 3, 2, 2], common::uniform(&mut rng, 24, -1.0, 1.0)).unwrap();
        let weights = FdWeights {
            layers: vec![common::uniform(&mut rng, 3, 0.0, 2.0), common::uniform(&mut rng, 3, 0.0, 2.0)],
            pooled: rng.random_range(0.0..2.0),
        };
        let r = finite_difference_check(
            |tape, x| {
                let b = tape.max_pool2d(x, 2)?;
                let pooled = tape.global_avg_pool(b)?;
                let cur = FeatureBundle { layers: vec![x, b], pooled, scores: pooled };
                let (ta, tb) = (tape.constant(pa.clone()), tape.constant(pb.clone()));
                let tp = tape.global_avg_pool(tb)?;
                let prev = FeatureBundle { layers: vec![ta, tb], pooled: tp, scores: tp };
                baseline_fd_loss(tape, &cur, &prev, Some(&weights))
            },
            &x,
            STEP,
            TOL,
        )
        .unwrap();
        worst[1] = worst[1].max(r.max_rel_deviation);
        check(r.passed, "baseline_fd_loss", &mut failures);

        let slots = rng.random_range(2..8);
        let batch = rng.random_range(1..6);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..slots)).collect();
        let scores = Tensor::new(vec![batch, slots], common::uniform(&mut rng, batch * slots, -1.0, 1.0)).unwrap();
        let scale = rng.random_range(0.5..10.0);
        let by_scores = finite_difference_check(
            |tape, x| {
                let s = tape.constant(Tensor::scalar(scale));
                lsc_loss(tape, x, s, &labels, 0.6)
            },
            &scores,
            STEP,
            TOL,
        )
        .unwrap();
        let r = finite_difference_check(
            |tape, s| {
                let x = tape.constant(scores.clone());
                lsc_loss(tape, x, s, &labels, 0.6)
            },
            &Tensor::scalar(scale),
            STEP,
            TOL,
        )
        .unwrap();
        check(by_scores.passed, "lsc_loss scores", &mut failures);
        worst[2] = worst[2].max(by_scores.max_rel_deviation);
        worst[2] = worst[2].max(r.max_rel_deviation);
        check(r.passed, "lsc_loss", &mut failures);
    }
    failures.dedup();
    finish(
        failures,
        format!(
            "max relative deviation s2il {:.1e}, fd {:.1e}, lsc {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn herding_oracle() -> Outcome {
    let mut rng = common::rng(4);
    let mut failures = Vec::new();
    for _ in 0..100 {
        let n = rng.random_range(1..=30);
        let k = rng.random_range(0..=n.min(10));
        let dim = rng.random_range(1..8);
        let mut ids: Vec<usize> = (0..n).map(|i| 5 * i + 2).collect();
        for i in (1..n).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let feats: Vec<Vec<f64>> = (0..n).map(|_| common::uniform(&mut rng, dim, -1.0, 1.0)).collect();
        let normalize = rng.random_bool(0.5);
        let got = herding_select(&ids, &feats, k, normalize).unwrap();
        check(got == common::herding_brute(&ids, &feats, k, normalize), "brute-force match", &mut failures);
        let longer = herding_select(&ids, &feats, n.min(10), normalize).unwrap();
        check(longer[..k] == got[..], "prefix property", &mut failures);
    }
    failures.dedup();
    finish(failures, "100 instances, n <= 30, k <= 10".into())
}

fn metric_formulas() -> Outcome {
    let mut failures = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-10;
    check(close(aia(&[0.9, 0.8, 0.7]).unwrap(), 80.0), "aia example", &mut failures);
    check(close(aia(&[0.37]).unwrap(), 37.0), "aia single task", &mut failures);
    check(close(bt(&[vec![0.9], vec![0.8, 0.5]]).unwrap(), -10.0), "bt example", &mut failures);
    check(close(bt(&[vec![0.4], vec![0.4, 0.6]]).unwrap(), 0.0), "bt unchanged", &mut failures);
    check(close(fgt(&[vec![0.2], vec![0.5, 0.1], vec![0.9, 0.3, 0.7]]).unwrap(), 0.0), "fgt monotone", &mut failures);
    let peak = vec![vec![0.8], vec![0.9, 0.5], vec![0.7, 0.5, 0.6]];
    check(close(fgt(&peak).unwrap(), 20.0 / 2.0), "fgt peak", &mut failures);
    let same = [0.3, 0.7, 0.2];
    let zero = [0.0; 3];
    check(oracle_deviation(&same, &zero, &same, &zero).unwrap().value == 0.0, "D_l identical", &mut failures);
    let half = [0.15, 0.35, 0.1];
    check(close(oracle_deviation(&half, &zero, &same, &zero).unwrap().value, 0.25), "D_l half", &mut failures);

    let mut rng = common::rng(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let tasks = rng.random_range(2..12);
        let acc = common::random_triangle(&mut rng, tasks);
        let overall: Vec<f64> = acc.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
        let n = rng.random_range(1..20);
        let v: Vec<Vec<f64>> = (0..4).map(|_| common::uniform(&mut rng, n, 0.0, 1.0)).collect();
        for (got, want) in [
            (aia(&overall).unwrap(), common::aia_ref(&overall)),
            (bt(&acc).unwrap(), common::bt_ref(&acc)),
            (fgt(&acc).unwrap(), common::fgt_ref(&acc)),
            (
                oracle_deviation(&v[0], &v[1], &v[2], &v[3]).unwrap().value,
                common::deviation_ref(&v[0], &v[1], &v[2], &v[3]),
            ),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    check(worst < 1e-10, "random oracles", &mut failures);
    finish(failures, format!("max |metric - reference| = {worst:.2e}"))
}

fn acceptance_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(CONFIG).expect("acceptance config parses");
    cfg.output = std::env::temp_dir().join("s2il-acceptance");
    cfg
}

fn run_directional(m: &Manifest) -> Outcome {
    let mut failures = Vec::new();
    if m.status != "complete" {
        return Outcome {
            pass: false,
            detail: format!("run failed: {:?}", m.error),
        };
    }
    let none = m.point("none").expect("none point");
    let s2il = m.point("s2il").expect("s2il point");
    let (nf, sf) = (none.fgt.as_ref().unwrap().mean, s2il.fgt.as_ref().unwrap().mean);
    check(nf > sf, "(a) none Fgt > s2il Fgt", &mut failures);
    check(s2il.aia.mean >= none.aia.mean, "(b) s2il AIA >= none AIA", &mut failures);
    let oracle_min = m
        .runs
        .iter()
        .filter(|r| r.record.oracle)
        .map(|r| r.final_accuracy)
        .fold(f64::INFINITY, f64::min);
    let others_max = m
        .runs
        .iter()
        .filter(|r| !r.record.oracle)
        .map(|r| r.final_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    check(oracle_min >= others_max, "(c) oracle final >= every other final", &mut failures);
    finish(
        failures,
        format!(
            "Fgt none {nf:.2} vs s2il {sf:.2}; AIA none {:.2} vs s2il {:.2}; oracle final min {oracle_min:.3} vs others max {others_max:.3}",
            none.aia.mean, s2il.aia.mean
        ),
    )
}

fn oracle_deviation_sanity(m: &Manifest) -> Outcome {
    let (Some(none), Some(s2il)) = (m.point("none"), m.point("s2il")) else {
        return Outcome {
            pass: false,
            detail: "missing runs".into(),
        };
    };
    if m.point(ORACLE_LABEL).is_none() || none.deviation.is_empty() {
        return Outcome {
            pass: false,
            detail: "no oracle Grad-CAM deviations".into(),
        };
    }
    let wins: Vec<u32> = none
        .deviation
        .iter()
        .filter(|(c, d)| s2il.deviation.get(c).is_some_and(|s| s <= d))
        .map(|(c, _)| *c)
        .collect();
    let detail = none
        .deviation
        .iter()
        .map(|(c, d)| format!("class {c}: s2il {:.3} / none {d:.3}", s2il.deviation[c]))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome {
        pass: wins.len() >= 3,
        detail: format!("s2il <= none on {} of {} base classes ({detail})", wins.len(), none.deviation.len()),
    }
}

fn reproducible(a: &Manifest, b: &Manifest) -> Outcome {
    let same = a.runs.len() == b.runs.len()
        && a.runs.iter().zip(&b.runs).all(|(x, y)| x.label == y.label && x.record.acc == y.record.acc);
    Outcome {
        pass: same,
        detail: format!("{} runs compared cell by cell", a.runs.len()),
    }
}

fn report(n: usize, name: &str, limit: Option<Duration>, elapsed: Duration, o: Outcome) -> bool {
    let slow = limit.is_some_and(|l| elapsed > l);
    let pass = o.pass && !slow;
    let budget = limit.map_or(String::new(), |l| format!(" (limit {:.0}s)", l.as_secs_f64()));
    println!(
        "criterion {n} {name}: {} in {:.1}s{budget}: {}{}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        o.detail,
        if slow { "; over time budget" } else { "" }
    );
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

fn main() {
    let mut all = true;
    let (o, d) = timed(ssim_kernel);
    all &= report(1, "ssim kernel", Some(Duration::from_secs(5)), d, o);
    let (o, d) = timed(loss_contracts);
    all &= report(2, "loss contracts", Some(Duration::from_secs(10)), d, o);
    let (o, d) = timed(gradient_suite);
    all &= report(3, "gradient suite", Some(Duration::from_secs(120)), d, o);
    let (o, d) = timed(herding_oracle);
    all &= report(4, "herding oracle", Some(Duration::from_secs(10)), d, o);
    let (o, d) = timed(metric_formulas);
    all &= report(5, "metric formulas", None, d, o);

    let cfg = acceptance_config();
    let ((first, err), d6) = timed(|| run_experiment(&cfg));
    if let Some(e) = err {
        println!("end-to-end run error: {e}");
    }
    all &= report(6, "end-to-end direction", Some(Duration::from_secs(20 * 60)), d6, run_directional(&first));
    all &= report(7, "oracle deviation", None, Duration::ZERO, oracle_deviation_sanity(&first));
    let ((second, _), d8) = timed(|| run_experiment(&cfg));
    all &= report(8, "reproducibility", None, d8, reproducible(&first, &second));

    if !all {
        std::process::exit(1);
    }
}
