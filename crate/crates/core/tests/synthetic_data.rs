use mesocast_core::fft::signed_k;
use mesocast_core::grids::normalize;
use mesocast_core::predictor::IdealLowPass;
use mesocast_core::spectral::{calibrate, log_log_slope, psd_x};
use mesocast_core::synthetic::{generate_dataset, SynthConfig};

/// Expected x-direction PSD at `kx` of the separable power-law field used as
/// the synthetic spectrum, for total variance `amp^2`.
fn analytic_psd(ny: usize, nx: usize, slope: f64, amp: f64, kx: usize) -> f64 {
    let w = |k: i64| (k.unsigned_abs().max(1) as f64).powf(-slope);
    let mut total = 0.0;
    for iy in 0..ny {
        for ix in 0..nx {
            let (ky, k) = (signed_k(iy, ny), signed_k(ix, nx));
            if ky != 0 || k != 0 {
                total += w(ky) * w(k);
            }
        }
    }
    let column: f64 = (0..ny).map(|iy| w(signed_k(iy, ny))).sum();
    amp * amp * w(kx as i64) * column / total
}

#[test]
fn train_split_slope_matches_configuration() {
    let cfg = SynthConfig::default();
    let ds = generate_dataset(&cfg).unwrap();
    for ch in &cfg.channels {
        let p = psd_x(&ds.train, &ch.name).unwrap();
        let slope = log_log_slope(&p, 2, cfg.grid[1] / 4);
        assert!(
            (slope + ch.spectral_slope).abs() <= 0.3,
            "{}: fitted slope {slope:.3}, configured -{}",
            ch.name,
            ch.spectral_slope
        );
    }
}

#[test]
fn same_seed_writes_identical_files() {
    let cfg = SynthConfig {
        grid: [32, 48],
        n_steps: 40,
        ..SynthConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        generate_dataset(&cfg).unwrap().write(d.path(), cfg.seed).unwrap();
    }
    for split in ["train", "val", "test"] {
        let name = format!("{split}.gset");
        assert_eq!(
            std::fs::read(dirs[0].path().join(&name)).unwrap(),
            std::fs::read(dirs[1].path().join(&name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn calibration_on_synthetic_data_recovers_the_analytic_level() {
    // a low-pass forecaster at the forcing cutoff on the prognostic channels
    let cutoff = 16;
    let cfg = SynthConfig {
        forcing_cutoff_wavenumber: cutoff,
        precip: None,
        ..SynthConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let val: Vec<_> = ds.val.iter().map(|f| normalize(f).unwrap()).collect();
    let calib = calibrate(&val, &IdealLowPass { cutoff }, 0.1).unwrap();
    for (c, ch) in cfg.channels.iter().enumerate() {
        let std = ds.val[0].specs[c].norm_std;
        let psd = analytic_psd(cfg.grid[0], cfg.grid[1], ch.spectral_slope, ch.amplitude, cutoff) / (std * std);
        let analytic = (cfg.grid[1] as f64 * psd).sqrt();
        let got = &calib.per_variable[c];
        assert!(got.k_star.abs_diff(cutoff) <= 2, "{}: k* = {}", ch.name, got.k_star);
        let rel = (got.sigma - analytic) / analytic;
        assert!(rel.abs() <= 0.2, "{}: sigma {:.4} vs analytic {analytic:.4} ({rel:+.3})", ch.name, got.sigma);
    }
}
