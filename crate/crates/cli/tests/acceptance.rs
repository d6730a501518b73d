//! Acceptance suite: one pass/fail line per criterion.
//!
//! Criteria 1-5 exercise the library against independent oracles. Criteria
//! 6-10 run the `mesocast demo` binary twice with seed 7 in single-threaded
//! mode and read the resulting reports, so this target takes as long as two
//! full desk runs.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor};
use mesocast_core::corrector::{
    preconditioning, train_corrector, CorrectorConfig, Denoiser, DiffTrainConfig, EdmParams, GaussianDenoiser,
    NetworkDenoiser,
};
use mesocast_core::fft::signed_k;
use mesocast_core::grids::{FieldSet, VariableSpec};
use mesocast_core::predictor::{Forecaster, IdealLowPass};
use mesocast_core::rng;
use mesocast_core::spectral::{cutoff_wavenumber, noise_level, psd_fields, psd_x, Cutoff};
use mesocast_core::synthetic::{make_grf, rows_of};
use mesocast_core::verify::{fss, pmm, VerificationReport};
use ndarray::{Array2, Array3};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

// ---------------------------------------------------------------- 1. FSS

fn brute_force_fss(f: &Array2<f64>, o: &Array2<f64>, thr: f64, n: usize) -> f64 {
    let (h, w) = f.dim();
    let r = (n / 2) as i64;
    let frac = |a: &Array2<f64>, y: usize, x: usize| {
        let (mut hits, mut cells) = (0.0, 0.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    cells += 1.0;
                    if a[[yy as usize, xx as usize]] >= thr {
                        hits += 1.0;
                    }
                }
            }
        }
        hits / cells
    };
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (pf, po) = (frac(f, y, x), frac(o, y, x));
            num += (pf - po) * (pf - po);
            den += pf * pf + po * po;
        }
    }
    if den == 0.0 {
        1.0
    } else {
        1.0 - num / den
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut r = rng::stream(101, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let density = r.random_range(0.05..0.6);
        let mut binary = || Array2::from_shape_fn((9, 9), |_| if r.random::<f64>() < density { 1.0 } else { 0.0 });
        let (f, o) = (binary(), binary());
        for n in [1, 3, 5] {
            let got = fss(std::slice::from_ref(&f), std::slice::from_ref(&o), 0.5, n).unwrap();
            worst = worst.max((got - brute_force_fss(&f, &o, 0.5, n)).abs());
        }
    }
    let el = t.elapsed();
    outcome(
        worst <= 1e-12 && within(el, 10.0),
        format!("max |FSS - brute force| = {worst:.2e} over 600 evaluations (tol 1e-12), {el:.2?}"),
    )
}

// ---------------------------------------------------------------- 2. PMM

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut r = rng::stream(202, 0);
    let mut failures = Vec::new();
    for trial in 0..100 {
        let m = r.random_range(1..=8);
        let (h, w) = (r.random_range(2..12), r.random_range(2..12));
        // integer-valued members so ties occur
        let members: Vec<Array2<f64>> = (0..m)
            .map(|_| Array2::from_shape_fn((h, w), |_| r.random_range(0..6) as f64))
            .collect();
        let out = pmm(&members);

        let single = pmm(&members[..1]);
        if single != members[0] {
            failures.push(format!("trial {trial}: M=1 identity"));
        }
        let clones = vec![members[0].clone(); m];
        if pmm(&clones) != members[0] {
            failures.push(format!("trial {trial}: identical members identity"));
        }

        let mut pooled: Vec<f64> = members.iter().flat_map(|a| a.iter().copied()).collect();
        pooled.sort_by(|a, b| b.total_cmp(a));
        let mut expected: Vec<f64> = pooled.iter().step_by(m).copied().collect();
        let mut got: Vec<f64> = out.iter().copied().collect();
        expected.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        if expected != got {
            failures.push(format!("trial {trial}: value multiset"));
        }

        let mean: Vec<f64> = (0..h * w)
            .map(|i| members.iter().map(|a| a.as_slice().unwrap()[i]).sum::<f64>() / m as f64)
            .collect();
        let o = out.as_slice().unwrap();
        for a in 0..h * w {
            for b in 0..h * w {
                if mean[a] > mean[b] && o[a] < o[b] {
                    failures.push(format!("trial {trial}: rank order at cells {a}, {b}"));
                }
            }
        }
    }
    let el = t.elapsed();
    outcome(
        failures.is_empty() && within(el, 10.0),
        if failures.is_empty() {
            format!("100 ensembles, all four invariants exact, {el:.2?}")
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    )
}

// ---------------------------------------------------------------- 3. Parseval

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut r = rng::stream(303, 0);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let (h, w) = (r.random_range(1..40), r.random_range(2..130));
        let field = if i % 2 == 0 {
            Array2::from_shape_fn((h, w), |_| r.random_range(-3.0f32..5.0))
        } else {
            rows_of(&[make_grf((h.max(2), w), 2.0 + (i % 3) as f64, 1.5, i as u64)])
        };
        let p = psd_fields("f", [field.view()]).unwrap();
        let ms = field.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / field.len() as f64;
        worst = worst.max(((p.two_sided_total() - ms) / ms).abs());
    }
    let el = t.elapsed();
    outcome(
        worst <= 1e-6 && within(el, 5.0),
        format!("max relative |sum PSD - mean square| = {worst:.2e} over 50 fields (tol 1e-6), {el:.2?}"),
    )
}

// ---------------------------------------------------------------- 4. calibration

/// Expected x-direction PSD at `kx` of the separable power-law field: modes carry
/// weight `max(|ky|,1)^-a * max(|kx|,1)^-a`, normalized to variance `amp^2`.
fn analytic_grf_psd(ny: usize, nx: usize, slope: f64, amp: f64, kx: usize) -> f64 {
    let w = |k: i64| (k.unsigned_abs().max(1) as f64).powf(-slope);
    let mut total = 0.0;
    for iy in 0..ny {
        for ix in 0..nx {
            let (ky, kxx) = (signed_k(iy, ny), signed_k(ix, nx));
            if ky != 0 || kxx != 0 {
                total += w(ky) * w(kxx);
            }
        }
    }
    let column: f64 = (0..ny).map(|iy| w(signed_k(iy, ny))).sum();
    amp * amp * w(kx as i64) * column / total
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let (ny, nx, slope, amp) = (64, 128, 3.0, 1.0);
    let spec = vec![VariableSpec::new("g", "1")];
    let truth: Vec<FieldSet> = (0..256)
        .map(|s| {
            let f = rows_of(&[make_grf((ny, nx), slope, amp, 4000 + s)]);
            FieldSet::new(f.insert_axis(ndarray::Axis(0)), spec.clone(), s as i64, 6.0).unwrap()
        })
        .collect();
    let truth_psd = psd_x(&truth, "g").unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for kc in [10, 12, 16] {
        let lp = IdealLowPass { cutoff: kc };
        let preds: Vec<FieldSet> = truth.iter().map(|f| lp.predict(f).unwrap()).collect();
        let pred_psd = psd_x(&preds, "g").unwrap();
        let mut ks = Vec::new();
        for p in [0.05, 0.1, 0.2] {
            ks.push(match cutoff_wavenumber(&pred_psd, &truth_psd, p).unwrap() {
                Cutoff::Found(k) => k,
                Cutoff::NoDrop => usize::MAX,
            });
        }
        let k_star = ks[1];
        let sigma = noise_level(&truth_psd, k_star.min(nx / 2));
        let analytic = (nx as f64 * analytic_grf_psd(ny, nx, slope, amp, kc)).sqrt();
        let rel = (sigma - analytic).abs() / analytic;
        let monotone = ks[0] <= ks[1] && ks[1] <= ks[2];
        let ok = k_star.abs_diff(kc) <= 2 && rel <= 0.2 && monotone;
        pass &= ok;
        lines.push(format!(
            "k_c={kc}: k*={k_star} sigma={sigma:.4} analytic={analytic:.4} ({:+.1}%) k*(p)={ks:?}",
            100.0 * (sigma - analytic) / analytic
        ));
    }
    let el = t.elapsed();
    outcome(pass && within(el, 60.0), format!("{}; {el:.2?}", lines.join("; ")))
}

// ---------------------------------------------------------------- 5. EDM

fn gaussian_fields(n: usize, seed: u64, s: f64) -> Vec<FieldSet> {
    (0..n)
        .map(|i| {
            let v = rng::normal_vec(&mut rng::stream(seed, i as u64), 16 * 16);
            let a = Array3::from_shape_vec((1, 16, 16), v.iter().map(|z| (s * *z as f64) as f32).collect()).unwrap();
            FieldSet::new(a, vec![VariableSpec::new("g", "1")], i as i64, 6.0).unwrap()
        })
        .collect()
}

fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let d = (a - b).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() as f64;
    let n = b.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() as f64;
    (d / n).sqrt()
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let dev = Device::Cpu;
    let s = 1.0;
    let edm = EdmParams::default();
    let cfg = CorrectorConfig {
        in_channels: 1,
        base_embed: 16,
        channel_mult: vec![1, 2],
        res_blocks: 1,
    };

    // formulas against reference arithmetic
    let mut r = rng::stream(505, 0);
    let mut formula_err: f64 = 0.0;
    for _ in 0..1000 {
        let sigma: f64 = r.random_range(1e-3..80.0);
        let sd: f64 = r.random_range(0.05..3.0);
        let p = preconditioning(sigma, sd);
        let d = sigma * sigma + sd * sd;
        for (got, want) in [
            (p.c_skip, sd * sd / d),
            (p.c_out, sigma * sd / d.sqrt()),
            (p.c_in, 1.0 / d.sqrt()),
            (p.c_noise, sigma.ln() / 4.0),
        ] {
            formula_err = formula_err.max((got - want).abs());
        }
    }

    let untrained = NetworkDenoiser::new(&cfg, edm, vec!["g".into()], 9, &dev).unwrap();
    let probe = gaussian_fields(1, 77, s).remove(0);
    let x = Tensor::from_slice(probe.values.as_slice().unwrap(), (1, 1, 16, 16), &dev).unwrap();
    let identity = untrained.denoise(&x, 0.0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        == x.flatten_all().unwrap().to_vec1::<f32>().unwrap();

    let tcfg = DiffTrainConfig {
        epochs: 60,
        batch: 16,
        lr: 2e-3,
        seed: 5,
        ..DiffTrainConfig::default()
    };
    let (den, _) = train_corrector(&gaussian_fields(256, 55, s), &cfg, &edm, &tcfg, &dev, None).unwrap();
    let oracle = GaussianDenoiser { variance: s * s };

    let clean = gaussian_fields(32, 99, s);
    let clean: Vec<f32> = clean.iter().flat_map(|f| f.values.iter().copied()).collect();
    let clean = Tensor::from_vec(clean, (32, 1, 16, 16), &dev).unwrap();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (i, sigma) in [0.1, 0.5, 1.0].into_iter().enumerate() {
        let noise = rng::normal_vec(&mut rng::stream(999, i as u64), 32 * 256);
        let noise = Tensor::from_vec(noise.iter().map(|z| sigma as f32 * z).collect::<Vec<_>>(), (32, 1, 16, 16), &dev)
            .unwrap();
        let noisy = (&clean + noise).unwrap();
        let want = oracle.denoise(&noisy, sigma).unwrap();
        let got = den.denoise(&noisy, sigma).unwrap();
        let before = relative_error(&untrained.denoise(&noisy, sigma).unwrap(), &want);
        let e = relative_error(&got, &want);
        worst = worst.max(e);
        parts.push(format!("sigma={sigma}: {:.1}% (untrained {:.1}%)", 100.0 * e, 100.0 * before));
    }
    let el = t.elapsed();
    outcome(
        identity && formula_err <= 1e-12 && worst < 0.1 && within(el, 600.0),
        format!(
            "zero-sigma identity {identity}; max formula error {formula_err:.1e}; trained vs closed form {}; {el:.2?}",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 6-10. demo runs

struct DemoRun {
    report_bytes: Vec<u8>,
    report: VerificationReport,
    elapsed: Duration,
    predictor_train_s: f64,
    corrector_train_s: f64,
}

fn final_wall_s(log: &Path) -> f64 {
    let text = std::fs::read_to_string(log).unwrap_or_default();
    text.lines()
        .last()
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .and_then(|v| v["wall_s"].as_f64())
        .unwrap_or(f64::NAN)
}

fn demo(dir: &Path) -> Result<DemoRun, String> {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_mesocast"))
        .args(["demo", "--seed", "7", "--single-threaded", "--out"])
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("cannot launch mesocast: {e}"))?;
    let elapsed = t.elapsed();
    if !out.status.success() {
        return Err(format!(
            "demo exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    let path = dir.join("report/report.json");
    let report_bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let report = serde_json::from_slice(&report_bytes).map_err(|e| format!("report does not parse: {e}"))?;
    Ok(DemoRun {
        report_bytes,
        report,
        elapsed,
        predictor_train_s: final_wall_s(&dir.join("ckpt/predictor.log.jsonl")),
        corrector_train_s: final_wall_s(&dir.join("ckpt/corrector.log.jsonl")),
    })
}

fn criterion_6(run: &DemoRun) -> Outcome {
    let s = &run.report.spectral;
    let pairs: Vec<(f64, f64)> = s
        .iter()
        .filter_map(|v| Some((v.high_k_predictor_error?, v.high_k_corrected_error?)))
        .collect();
    let per_var: Vec<String> = s
        .iter()
        .map(|v| match (v.high_k_predictor_error, v.high_k_corrected_error) {
            (Some(p), Some(c)) => format!("{} k*={} {p:.3}->{c:.3}", v.variable, v.k_star),
            _ => format!("{} k*={} n/a", v.variable, v.k_star),
        })
        .collect();
    let n = pairs.len() as f64;
    let pred = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let corr = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let budget = run.predictor_train_s <= 900.0 && run.corrector_train_s <= 900.0;
    outcome(
        !pairs.is_empty() && corr <= 0.5 * pred && budget,
        format!(
            "mean high-k |log PSD ratio| predictor {pred:.3}, corrected {corr:.3} (need <= {:.3}); {}; training {:.0} s + {:.0} s (limit 900 s each)",
            0.5 * pred,
            per_var.join(", "),
            run.predictor_train_s,
            run.corrector_train_s
        ),
    )
}

fn criterion_7(run: &DemoRun) -> Outcome {
    let rows: Vec<_> = run
        .report
        .fss
        .iter()
        .filter(|e| e.percentile == Some(95.0) && e.scale >= 7)
        .collect();
    let pass = !rows.is_empty() && rows.iter().all(|e| e.pmm >= e.predictor);
    let table: Vec<String> = rows
        .iter()
        .map(|e| format!("n={} predictor {:.4} pmm {:.4}", e.scale, e.predictor, e.pmm))
        .collect();
    outcome(pass, format!("p95 threshold, {}", table.join("; ")))
}

fn criterion_8(run: &DemoRun) -> Outcome {
    let limit = 1.2f64.ln();
    let vals: Vec<(String, Option<f64>)> = run
        .report
        .spectral
        .iter()
        .map(|v| (v.variable.clone(), v.low_k_member_vs_predictor))
        .collect();
    let scored: Vec<f64> = vals.iter().filter_map(|v| v.1).collect();
    let pass = !scored.is_empty() && scored.iter().all(|v| v.abs() <= limit);
    let parts: Vec<String> = vals
        .iter()
        .map(|(n, v)| match v {
            Some(v) => format!("{n} {v:+.3}"),
            None => format!("{n} n/a (k* < 3)"),
        })
        .collect();
    outcome(pass, format!("mean log(member/predictor) for k < k*/2: {} (limit +-{limit:.3})", parts.join(", ")))
}

fn criterion_9(run: &DemoRun) -> Outcome {
    let pass = run.report.rmse.iter().all(|r| r.ensemble_mean <= r.member_mean);
    let parts: Vec<String> = run
        .report
        .rmse
        .iter()
        .map(|r| {
            format!(
                "{} ens-mean {:.4} <= member {:.4} (predictor {:.4})",
                r.variable, r.ensemble_mean, r.member_mean, r.predictor
            )
        })
        .collect();
    outcome(pass, parts.join("; "))
}

fn criterion_10(a: &DemoRun, b: &DemoRun) -> Outcome {
    let identical = a.report_bytes == b.report_bytes;
    let worst = a.elapsed.max(b.elapsed);
    outcome(
        identical && within(worst, 45.0 * 60.0),
        format!(
            "report.json byte-identical: {identical} ({} bytes); demo wall time {:.1} min and {:.1} min (limit 45)",
            a.report_bytes.len(),
            a.elapsed.as_secs_f64() / 60.0,
            b.elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn print(id: usize, name: &str, o: &Outcome) {
    println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    // optional criterion ids on the command line select a subset
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| selected.is_empty() || selected.contains(&id);
    let mut results = Vec::new();
    let mut record = |id: usize, name: &str, o: Outcome| {
        print(id, name, &o);
        results.push(o.pass);
    };
    let oracles: [(usize, &str, fn() -> Outcome); 5] = [
        (1, "FSS oracle equivalence", criterion_1),
        (2, "PMM exactness", criterion_2),
        (3, "Parseval", criterion_3),
        (4, "calibration recovery", criterion_4),
        (5, "EDM correctness", criterion_5),
    ];
    for (id, name, check) in oracles {
        if wanted(id) {
            record(id, name, check());
        }
    }

    let demo_criteria = [
        (6, "spectral restoration"),
        (7, "FSS improvement"),
        (8, "low-frequency preservation"),
        (9, "RMSE convexity"),
        (10, "determinism"),
    ];
    if demo_criteria.iter().any(|(id, _)| wanted(*id)) {
        let tmp = tempfile::tempdir().expect("temp dir");
        let runs = demo(&tmp.path().join("d1")).and_then(|a| {
            let b = if wanted(10) { Some(demo(&tmp.path().join("d2"))?) } else { None };
            Ok((a, b))
        });
        match runs {
            Ok((a, b)) => {
                let checks: [(usize, &str, Box<dyn Fn() -> Outcome>); 5] = [
                    (6, demo_criteria[0].1, Box::new(|| criterion_6(&a))),
                    (7, demo_criteria[1].1, Box::new(|| criterion_7(&a))),
                    (8, demo_criteria[2].1, Box::new(|| criterion_8(&a))),
                    (9, demo_criteria[3].1, Box::new(|| criterion_9(&a))),
                    (10, demo_criteria[4].1, Box::new(|| criterion_10(&a, b.as_ref().expect("second run")))),
                ];
                for (id, name, check) in checks {
                    if wanted(id) {
                        record(id, name, check());
                    }
                }
            }
            Err(e) => {
                for (id, name) in demo_criteria {
                    if wanted(id) {
                        record(id, name, outcome(false, e.clone()));
                    }
                }
            }
        }
    }

    let passed = results.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
