//! Forecast verification: evaluation region, neighbourhood fractions and FSS,
//! probability matched mean, RMSE and spectral comparison.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::FieldSet;
use crate::sampler::EnsembleForecast;
use crate::spectral::{mean_abs_log_ratio, mean_log_ratio, psd_fields, NoiseCalibration, SpectrumProfile};

pub const REPORT_SCHEMA: u32 = 1;

/// Rows dropped at each y boundary before scoring.
pub const BOUNDARY_ROWS: usize = 5;

/// Drops `BOUNDARY_ROWS` rows at the top and bottom. Applying it twice removes twice as many.
pub fn evaluation_region<T: Clone>(field: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let y = field.nrows();
    if y <= 2 * BOUNDARY_ROWS {
        return Err(Error::ShapeMismatch(format!(
            "evaluation region needs more than {} rows, got {y}",
            2 * BOUNDARY_ROWS
        )));
    }
    Ok(field.slice(s![BOUNDARY_ROWS..y - BOUNDARY_ROWS, ..]).to_owned())
}

fn check_odd(n: usize) -> Result<()> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::InvalidConfig(format!("neighbourhood size must be odd and >= 1, got {n}")));
    }
    Ok(())
}

/// Fraction of cells `>= threshold` in the `n x n` window around each cell,
/// normalized by the number of in-domain cells the window covers.
pub fn fractions(field: ArrayView2<'_, f64>, threshold: f64, n: usize) -> Result<Array2<f64>> {
    check_odd(n)?;
    let (h, w) = field.dim();
    // summed-area table with a zero border
    let mut sat = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        for x in 0..w {
            let hit = if field[[y, x]] >= threshold { 1.0 } else { 0.0 };
            sat[[y + 1, x + 1]] = hit + sat[[y, x + 1]] + sat[[y + 1, x]] - sat[[y, x]];
        }
    }
    let r = n / 2;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
        let count = sat[[y1, x1]] - sat[[y0, x1]] - sat[[y1, x0]] + sat[[y0, x0]];
        count / ((y1 - y0) * (x1 - x0)) as f64
    }))
}

/// Aggregate fractions skill score over `N_t` forecast/observation pairs.
/// A zero denominator (no exceedances anywhere) scores 1.
pub fn fss(forecasts: &[Array2<f64>], observed: &[Array2<f64>], threshold: f64, n: usize) -> Result<f64> {
    if forecasts.len() != observed.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} forecasts vs {} observations",
            forecasts.len(),
            observed.len()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (f, o) in forecasts.iter().zip(observed) {
        if f.dim() != o.dim() {
            return Err(Error::ShapeMismatch(format!("forecast {:?} vs observation {:?}", f.dim(), o.dim())));
        }
        let ff = fractions(f.view(), threshold, n)?;
        let fo = fractions(o.view(), threshold, n)?;
        num += ff.iter().zip(fo.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        den += ff.iter().map(|a| a * a).sum::<f64>() + fo.iter().map(|b| b * b).sum::<f64>();
    }
    Ok(if den == 0.0 { 1.0 } else { 1.0 - num / den })
}

/// Probability matched mean: the pooled member values, sorted descending and
/// subsampled every M-th from index 0, placed on the cells in descending order
/// of the ensemble mean (ties broken by row-major index).
pub fn pmm(members: &[Array2<f64>]) -> Array2<f64> {
    let m = members.len();
    assert!(m > 0, "pmm needs at least one member");
    let dim = members[0].dim();
    let g = dim.0 * dim.1;
    let mut pooled: Vec<f64> = members.iter().flat_map(|a| a.iter().copied()).collect();
    pooled.sort_by(|a, b| b.total_cmp(a));
    // the member sum orders cells exactly like the mean
    let mut mean = vec![0.0; g];
    for a in members {
        assert_eq!(a.dim(), dim, "pmm members differ in shape");
        for (acc, v) in mean.iter_mut().zip(a.iter()) {
            *acc += v;
        }
    }
    let mut cells: Vec<usize> = (0..g).collect();
    cells.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; g];
    for (rank, &cell) in cells.iter().enumerate() {
        out[cell] = pooled[rank * m];
    }
    Array2::from_shape_vec(dim, out).expect("shape from members")
}

/// Root mean square difference pooled over all pairs.
pub fn rmse(a: &[Array2<f64>], b: &[Array2<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} fields vs {}", a.len(), b.len())));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        if x.dim() != y.dim() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.dim(), y.dim())));
        }
        sum += x.iter().zip(y.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        count += x.len();
    }
    Ok((sum / count as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FssSpec {
    /// Variable scored with FSS and aggregated with PMM.
    pub variable: String,
    /// Thresholds as percentiles of the observed values in the evaluation region.
    pub percentiles: Vec<f64>,
    /// Absolute thresholds in physical units, scored in addition to the percentiles.
    pub thresholds: Vec<f64>,
    /// Odd neighbourhood sizes in grid units.
    pub scales: Vec<usize>,
}

impl Default for FssSpec {
    fn default() -> Self {
        FssSpec {
            variable: "precip".into(),
            percentiles: vec![90.0, 95.0, 99.0],
            thresholds: vec![],
            scales: vec![1, 3, 7, 15, 31],
        }
    }
}

impl FssSpec {
    pub fn validate(&self) -> Result<()> {
        for &n in &self.scales {
            check_odd(n)?;
        }
        if self.scales.is_empty() || (self.percentiles.is_empty() && self.thresholds.is_empty()) {
            return Err(Error::InvalidConfig("FSS needs at least one scale and one threshold".into()));
        }
        if self.percentiles.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(Error::InvalidConfig("percentiles must lie in [0, 100]".into()));
        }
        Ok(())
    }
}

/// Nearest-rank percentile.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FssEntry {
    pub threshold: f64,
    pub percentile: Option<f64>,
    pub scale: usize,
    pub predictor: f64,
    pub pmm: f64,
    pub ensemble_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseEntry {
    pub variable: String,
    pub units: String,
    pub predictor: f64,
    pub ensemble_mean: f64,
    /// Mean over member indices of each member's pooled RMSE.
    pub member_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdCurves {
    pub variable: String,
    pub k_star: usize,
    pub predictor: Vec<f64>,
    pub corrected: Vec<f64>,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub variable: String,
    pub k_star: usize,
    /// Mean |ln(PSD/PSD_truth)| over k > k*.
    pub high_k_predictor_error: Option<f64>,
    pub high_k_corrected_error: Option<f64>,
    /// Mean ln(PSD_corrected/PSD_predictor) over 1 <= k < k*/2.
    pub low_k_member_vs_predictor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub boundary_rows: usize,
    pub n_t: usize,
    pub n_y: usize,
    pub n_x: usize,
    pub members: usize,
    pub fraction_normalization: String,
    pub exceedance: String,
    pub pmm_phase: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema_version: u32,
    pub sigma: f64,
    pub calibration: NoiseCalibration,
    pub fss_variable: String,
    pub fss: Vec<FssEntry>,
    pub rmse: Vec<RmseEntry>,
    pub psd: Vec<PsdCurves>,
    pub spectral: Vec<SpectralSummary>,
    pub metadata: ReportMetadata,
}

/// One verified forecast case: the normalized ensemble and the normalized truth it targets.
pub struct Case<'a> {
    pub ensemble: &'a EnsembleForecast,
    pub truth: &'a FieldSet,
}

fn region_channel(fs: &FieldSet, c: usize) -> Result<Array2<f64>> {
    evaluation_region(fs.values.index_axis(Axis(0), c).mapv(f64::from).view())
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn spectral_summary(curves: &PsdCurves) -> SpectralSummary {
    let n2 = curves.truth.len() - 1;
    let profile = |psd: &Vec<f64>| SpectrumProfile {
        variable: curves.variable.clone(),
        n: 2 * n2,
        rows: 0,
        psd: psd.clone(),
    };
    let (p, c, t) = (profile(&curves.predictor), profile(&curves.corrected), profile(&curves.truth));
    let ks = curves.k_star;
    let high = || (ks + 1)..=n2;
    let low = || (1..).take_while(move |&k| 2 * k < ks);
    let nonempty = |n: usize, v: f64| if n == 0 { None } else { finite(v) };
    SpectralSummary {
        variable: curves.variable.clone(),
        k_star: ks,
        high_k_predictor_error: nonempty(high().count(), mean_abs_log_ratio(&p, &t, high())),
        high_k_corrected_error: nonempty(high().count(), mean_abs_log_ratio(&c, &t, high())),
        low_k_member_vs_predictor: nonempty(low().count(), mean_log_ratio(&c, &p, low())),
    }
}

/// Scores every case and assembles the report.
pub fn build_report(cases: &[Case<'_>], calibration: &NoiseCalibration, spec: &FssSpec) -> Result<VerificationReport> {
    spec.validate()?;
    if cases.is_empty() {
        return Err(Error::MissingArtifact("forecast cases (no ensembles to verify)".into()));
    }
    let first = cases[0].ensemble;
    if first.members.is_empty() {
        return Err(Error::MissingArtifact("ensemble members".into()));
    }
    let specs = &first.predictor_output.specs;
    let physical: Vec<(EnsembleForecast, FieldSet)> = cases
        .iter()
        .map(|c| {
            c.ensemble.predictor_output.compatible_with(c.truth)?;
            Ok((c.ensemble.denormalized()?, crate::grids::denormalize(c.truth)?))
        })
        .collect::<Result<_>>()?;

    // RMSE in physical units over the evaluation region
    let mut rmse_entries = Vec::new();
    for (c, sp) in specs.iter().enumerate() {
        let truth: Vec<_> = physical.iter().map(|(_, t)| region_channel(t, c)).collect::<Result<_>>()?;
        let pred: Vec<_> = physical.iter().map(|(e, _)| region_channel(&e.predictor_output, c)).collect::<Result<_>>()?;
        let mean: Vec<_> = physical
            .iter()
            .map(|(e, _)| region_channel(&e.ensemble_mean()?, c))
            .collect::<Result<_>>()?;
        let m = first.members.len();
        let mut member_rmse = 0.0;
        for i in 0..m {
            let mem: Vec<_> = physical.iter().map(|(e, _)| region_channel(&e.members[i], c)).collect::<Result<_>>()?;
            member_rmse += rmse(&mem, &truth)?;
        }
        rmse_entries.push(RmseEntry {
            variable: sp.name.clone(),
            units: sp.units.clone(),
            predictor: rmse(&pred, &truth)?,
            ensemble_mean: rmse(&mean, &truth)?,
            member_mean: member_rmse / m as f64,
        });
    }

    // FSS on the precipitation-like variable
    let pc = first
        .predictor_output
        .channel_index(&spec.variable)
        .ok_or_else(|| Error::MissingArtifact(format!("FSS variable '{}' in the forecasts", spec.variable)))?;
    let obs: Vec<_> = physical.iter().map(|(_, t)| region_channel(t, pc)).collect::<Result<_>>()?;
    let pred: Vec<_> = physical.iter().map(|(e, _)| region_channel(&e.predictor_output, pc)).collect::<Result<_>>()?;
    let pmm_fields: Vec<_> = physical
        .iter()
        .map(|(e, _)| evaluation_region(e.pmm(pc).view()))
        .collect::<Result<_>>()?;
    let mean_fields: Vec<_> = physical
        .iter()
        .map(|(e, _)| region_channel(&e.ensemble_mean()?, pc))
        .collect::<Result<_>>()?;
    let pooled: Vec<f64> = obs.iter().flat_map(|a| a.iter().copied()).collect();
    let mut thresholds: Vec<(f64, Option<f64>)> = spec.percentiles.iter().map(|&p| (percentile(&pooled, p), Some(p))).collect();
    thresholds.extend(spec.thresholds.iter().map(|&t| (t, None)));
    let mut fss_entries = Vec::new();
    for &(threshold, pct) in &thresholds {
        for &n in &spec.scales {
            fss_entries.push(FssEntry {
                threshold,
                percentile: pct,
                scale: n,
                predictor: fss(&pred, &obs, threshold, n)?,
                pmm: fss(&pmm_fields, &obs, threshold, n)?,
                ensemble_mean: fss(&mean_fields, &obs, threshold, n)?,
            });
        }
    }

    // spectra of the normalized fields
    let mut psd = Vec::new();
    for (c, sp) in specs.iter().enumerate() {
        let chan = |fs: &FieldSet| fs.values.index_axis(Axis(0), c).to_owned();
        let truth_f: Vec<_> = cases.iter().map(|k| chan(k.truth)).collect();
        let pred_f: Vec<_> = cases.iter().map(|k| chan(&k.ensemble.predictor_output)).collect();
        let mem_f: Vec<_> = cases.iter().flat_map(|k| k.ensemble.members.iter().map(chan)).collect();
        let t = psd_fields(&sp.name, truth_f.iter().map(|a| a.view()))?;
        let k_star = calibration.k_star(&sp.name).unwrap_or(t.n / 2);
        psd.push(PsdCurves {
            variable: sp.name.clone(),
            k_star,
            predictor: psd_fields(&sp.name, pred_f.iter().map(|a| a.view()))?.psd,
            corrected: psd_fields(&sp.name, mem_f.iter().map(|a| a.view()))?.psd,
            truth: t.psd,
        });
    }
    let spectral = psd.iter().map(spectral_summary).collect();
    let (ny, nx) = obs[0].dim();
    Ok(VerificationReport {
        schema_version: REPORT_SCHEMA,
        sigma: first.sigma,
        calibration: calibration.clone(),
        fss_variable: spec.variable.clone(),
        fss: fss_entries,
        rmse: rmse_entries,
        psd,
        spectral,
        metadata: ReportMetadata {
            boundary_rows: BOUNDARY_ROWS,
            n_t: cases.len(),
            n_y: ny,
            n_x: nx,
            members: first.members.len(),
            fraction_normalization: "valid-area".into(),
            exceedance: ">=".into(),
            pmm_phase: 0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_fss(f: &[Array2<f64>], o: &[Array2<f64>], thr: f64, n: usize) -> f64 {
        // direct window sums with per-cell valid-area counting
        let frac = |a: &Array2<f64>, y: usize, x: usize| {
            let r = n as i64 / 2;
            let (mut hit, mut tot) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < a.nrows() && (xx as usize) < a.ncols() {
                        tot += 1.0;
                        if a[[yy as usize, xx as usize]] >= thr {
                            hit += 1.0;
                        }
                    }
                }
            }
            hit / tot
        };
        let (mut num, mut den) = (0.0, 0.0);
        for (a, b) in f.iter().zip(o) {
            for y in 0..a.nrows() {
                for x in 0..a.ncols() {
                    let (p, q) = (frac(a, y, x), frac(b, y, x));
                    num += (p - q) * (p - q);
                    den += p * p + q * q;
                }
            }
        }
        if den == 0.0 {
            1.0
        } else {
            1.0 - num / den
        }
    }

    #[test]
    fn region_examples() {
        let a = Array2::<f64>::zeros((512, 768));
        assert_eq!(evaluation_region(a.view()).unwrap().dim(), (502, 768));
        let b = Array2::<f64>::zeros((11, 4));
        assert_eq!(evaluation_region(b.view()).unwrap().nrows(), 1);
        assert!(evaluation_region(Array2::<f64>::zeros((10, 4)).view()).is_err());
        let twice = evaluation_region(evaluation_region(a.view()).unwrap().view()).unwrap();
        assert_eq!(twice.nrows(), 492);
    }

    #[test]
    fn fraction_examples() {
        let all = Array2::from_elem((7, 9), 5.0);
        for n in [1, 3, 5, 9] {
            assert!(fractions(all.view(), 1.0, n).unwrap().iter().all(|&v| v == 1.0));
        }
        let mut one = Array2::zeros((9, 9));
        one[[4, 4]] = 1.0;
        let f = fractions(one.view(), 0.5, 3).unwrap();
        for y in 3..=5 {
            for x in 3..=5 {
                assert!((f[[y, x]] - 1.0 / 9.0).abs() < 1e-15);
            }
        }
        assert_eq!(f[[2, 4]], 0.0);
        let ind = fractions(one.view(), 0.5, 1).unwrap();
        assert_eq!(ind, one);
        assert!(fractions(one.view(), 0.5, 2).is_err());
    }

    #[test]
    fn fss_examples() {
        let a = vec![Array2::from_shape_fn((9, 9), |(y, x)| ((y * 7 + x * 3) % 5) as f64)];
        assert_eq!(fss(&a, &a, 2.0, 3).unwrap(), 1.0);
        let hit = vec![Array2::from_elem((9, 9), 1.0)];
        let miss = vec![Array2::zeros((9, 9))];
        assert_eq!(fss(&hit, &miss, 0.5, 1).unwrap(), 0.0);
        assert_eq!(fss(&miss, &miss, 0.5, 3).unwrap(), 1.0);
    }

    #[test]
    fn pmm_hand_worked() {
        let a = ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = ndarray::arr2(&[[0.0, 0.0], [0.0, 8.0]]);
        let p = pmm(&[a, b]);
        // means: 0.5, 1, 1.5, 6 -> ranks (1,1), (1,0), (0,1), (0,0)
        assert_eq!(p, ndarray::arr2(&[[0.0, 1.0], [3.0, 8.0]]));
    }

    #[test]
    fn pmm_identities() {
        let a = Array2::from_shape_fn((4, 5), |(y, x)| (y * 5 + x) as f64 * 0.3);
        assert_eq!(pmm(&[a.clone()]), a);
        assert_eq!(pmm(&[a.clone(), a.clone(), a.clone()]), a);
    }

    #[test]
    fn rmse_examples() {
        let t = vec![ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]])];
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        let b = vec![t[0].mapv(|v| v - 0.5)];
        assert!((rmse(&b, &t).unwrap() - 0.5).abs() < 1e-15);
        // three members on 2x2: mean [[1,2],[3,5]] vs truth [[1,2],[3,4]] -> sqrt(1/4)
        let members = [
            ndarray::arr2(&[[0.0, 2.0], [3.0, 6.0]]),
            ndarray::arr2(&[[1.0, 1.0], [3.0, 5.0]]),
            ndarray::arr2(&[[2.0, 3.0], [3.0, 4.0]]),
        ];
        let mean = (&members[0] + &members[1] + &members[2]) / 3.0;
        assert!((rmse(&[mean], &t).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }

    fn binary_field(bits: &[bool]) -> Array2<f64> {
        Array2::from_shape_fn((9, 9), |(y, x)| if bits[y * 9 + x] { 1.0 } else { 0.0 })
    }

    proptest! {
        #[test]
        fn fss_matches_brute_force(
            a in proptest::collection::vec(any::<bool>(), 81),
            b in proptest::collection::vec(any::<bool>(), 81),
            n in prop::sample::select(vec![1usize, 3, 5]),
        ) {
            let f = vec![binary_field(&a)];
            let o = vec![binary_field(&b)];
            let got = fss(&f, &o, 0.5, n).unwrap();
            prop_assert!((got - brute_fss(&f, &o, 0.5, n)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
        }

        #[test]
        fn pmm_invariants(
            m in 1usize..6,
            vals in proptest::collection::vec(0u8..20, 6 * 12),
        ) {
            let members: Vec<Array2<f64>> = (0..m)
                .map(|i| Array2::from_shape_fn((3, 4), |(y, x)| vals[i * 12 + y * 4 + x] as f64))
                .collect();
            let p = pmm(&members);
            let mut pooled: Vec<f64> = members.iter().flat_map(|a| a.iter().copied()).collect();
            pooled.sort_by(|a, b| b.total_cmp(a));
            let mut expect: Vec<f64> = pooled.iter().step_by(m).copied().collect();
            let mut got: Vec<f64> = p.iter().copied().collect();
            expect.sort_by(f64::total_cmp);
            got.sort_by(f64::total_cmp);
            prop_assert_eq!(got, expect);
            let mean: Vec<f64> = (0..12).map(|i| members.iter().map(|a| a[[i / 4, i % 4]]).sum::<f64>()).collect();
            for i in 0..12 {
                for j in 0..12 {
                    if mean[i] > mean[j] {
                        prop_assert!(p[[i / 4, i % 4]] >= p[[j / 4, j % 4]]);
                    }
                }
            }
        }

        #[test]
        fn ensemble_mean_rmse_is_at_most_member_mean(
            vals in proptest::collection::vec(-5.0f64..5.0, 4 * 16 + 16),
        ) {
            let truth = vec![Array2::from_shape_fn((4, 4), |(y, x)| vals[64 + y * 4 + x])];
            let members: Vec<Array2<f64>> = (0..4).map(|i| Array2::from_shape_fn((4, 4), |(y, x)| vals[i * 16 + y * 4 + x])).collect();
            let mean = members.iter().fold(Array2::zeros((4, 4)), |a, m| a + m) / 4.0;
            let mm = members.iter().map(|m| rmse(&[m.clone()], &truth).unwrap()).sum::<f64>() / 4.0;
            prop_assert!(rmse(&[mean], &truth).unwrap() <= mm + 1e-12);
        }
    }
}
