//! Run-directory orchestration of the pipeline stages.
//!
//! ```text
//! <run>/config.json
//!       data/{train,val,test}.gset          physical units, train-split stats in the header
//!       ckpt/{predictor,corrector}.ckpt     plus *.log.jsonl training logs
//!       calib.json
//!       forecast/case_NNN/*.gset            members, predictor, ens_mean, pmm
//!       forecast/manifest.json
//!       report/report.json, report/*.svg
//!       manifest.json                       digests of every artifact
//! ```
//!
//! A stage is skipped when its recorded inputs and outputs still match their
//! digests, unless forced.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, LineWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::Device;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::corrector::train_corrector;
use crate::error::{Error, Result};
use crate::grids::{denormalize, normalize, FieldSet};
use crate::gset::{read_gridset, write_gridset};
use crate::predictor::train_predictor;
use crate::registry::{denoisers, forecasters, samplers, StrategyContext};
use crate::sampler::{ensemble_forecast, EnsembleForecast};
use crate::spectral::{calibrate, NoiseCalibration};
use crate::synthetic::generate_dataset;
use crate::verify::{build_report, Case, VerificationReport};

pub const STAGES: [&str; 6] = ["synth", "train-predictor", "train-corrector", "calibrate", "forecast", "verify"];

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self, split: &str) -> PathBuf {
        self.root.join("data").join(format!("{split}.gset"))
    }

    pub fn predictor_ckpt(&self) -> PathBuf {
        self.root.join("ckpt/predictor.ckpt")
    }

    pub fn corrector_ckpt(&self) -> PathBuf {
        self.root.join("ckpt/corrector.ckpt")
    }

    pub fn calib(&self) -> PathBuf {
        self.root.join("calib.json")
    }

    pub fn forecast_dir(&self) -> PathBuf {
        self.root.join("forecast")
    }

    pub fn forecast_manifest(&self) -> PathBuf {
        self.forecast_dir().join("manifest.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn report(&self) -> PathBuf {
        self.report_dir().join("report.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn require(&self, p: &Path, what: &str) -> Result<()> {
        if p.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact(format!("{what} ({})", p.display())))
        }
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    std::io::copy(&mut File::open(path)?, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

fn value_digest(v: &impl Serialize) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(v)?)))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub synth: u64,
    pub predictor: u64,
    pub corrector: u64,
    pub sampling: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub seeds: Seeds,
    pub calibration: Option<NoiseCalibration>,
    pub checkpoints: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
    /// Every artifact produced by a recorded stage, with its SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub created_unix: u64,
    pub updated_unix: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_digest: cfg.digest()?,
            seeds: Seeds {
                master: cfg.seed,
                synth: cfg.synth.seed,
                predictor: cfg.predictor_train.seed,
                corrector: cfg.corrector_train.seed,
                sampling: cfg.sample.base_seed,
            },
            calibration: None,
            checkpoints: BTreeMap::new(),
            stages: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            created_unix: now(),
            updated_unix: now(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

/// Per-case entry of the forecast manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastCase {
    pub case: usize,
    pub init_time_index: i64,
    pub dir: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastManifest {
    pub seeds: Vec<u64>,
    pub sigma: f64,
    pub steps: usize,
    pub sampler: String,
    pub forecaster: String,
    pub denoiser: String,
    pub checkpoint_digests: BTreeMap<String, String>,
    pub cases: Vec<ForecastCase>,
}

pub struct Pipeline {
    pub run: RunDir,
    pub cfg: RunConfig,
    pub force: bool,
    device: Device,
}

fn read_normalized(path: &Path) -> Result<Vec<FieldSet>> {
    let (_, seq) = read_gridset(path)?;
    seq.iter().map(normalize).collect()
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, v)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
}

impl Pipeline {
    /// Opens (or initializes) a run directory, writing `config.json`.
    pub fn open(run: RunDir, cfg: RunConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(run.root())?;
        let text = cfg.to_json()?;
        let current = std::fs::read_to_string(run.config()).ok();
        if current.as_deref() != Some(text.as_str()) {
            std::fs::write(run.config(), &text)?;
        }
        Ok(Pipeline {
            run,
            cfg,
            force,
            device: Device::Cpu,
        })
    }

    /// Config stored in a run directory, if any.
    pub fn stored_config(run: &RunDir) -> Result<Option<RunConfig>> {
        if !run.config().exists() {
            return Ok(None);
        }
        Ok(Some(RunConfig::load(run.config())?))
    }

    pub fn load_manifest(&self) -> Result<RunManifest> {
        if self.run.manifest().exists() {
            let mut m: RunManifest = read_json(&self.run.manifest())?;
            m.config_digest = self.cfg.digest()?;
            Ok(m)
        } else {
            RunManifest::new(&self.cfg)
        }
    }

    fn save_manifest(&self, m: &mut RunManifest) -> Result<()> {
        m.updated_unix = now();
        m.artifacts = m.stages.values().flat_map(|s| s.outputs.clone()).collect();
        write_json(&self.run.manifest(), m)
    }

    fn digests(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((self.run.rel(p), file_digest(p)?)))
            .collect()
    }

    /// Runs `body` unless the stage's recorded inputs and outputs are unchanged.
    fn stage(
        &self,
        name: &'static str,
        config_section: &impl Serialize,
        inputs: &[PathBuf],
        body: impl FnOnce() -> Result<Vec<PathBuf>>,
    ) -> Result<StageOutcome> {
        let run = || -> Result<StageOutcome> {
            for p in inputs {
                self.run.require(p, "stage input")?;
            }
            let mut in_digests = self.digests(inputs)?;
            in_digests.insert(format!("config:{name}"), value_digest(config_section)?);
            let manifest = self.load_manifest()?;
            if !self.force {
                if let Some(rec) = manifest.stages.get(name) {
                    let outputs_intact = rec
                        .outputs
                        .iter()
                        .all(|(p, d)| file_digest(&self.run.root().join(p)).ok().as_deref() == Some(d.as_str()));
                    if rec.inputs == in_digests && outputs_intact {
                        log::info!("{name}: up to date, skipping");
                        return Ok(StageOutcome::Skipped);
                    }
                }
            }
            log::info!("{name}: running");
            let outputs = body()?;
            let record = StageRecord {
                inputs: in_digests,
                outputs: self.digests(&outputs)?,
            };
            let mut manifest = self.load_manifest().unwrap_or(manifest);
            manifest.stages.insert(name.into(), record);
            self.save_manifest(&mut manifest)?;
            Ok(StageOutcome::Ran)
        };
        run().map_err(|e| e.in_stage(name))
    }

    fn strategy_context(&self) -> StrategyContext<'_> {
        StrategyContext {
            config: &self.cfg.strategies,
            predictor_checkpoint: self.run.predictor_ckpt(),
            corrector_checkpoint: self.run.corrector_ckpt(),
            device: self.device.clone(),
        }
    }

    pub fn synth(&self) -> Result<StageOutcome> {
        self.stage("synth", &self.cfg.synth, &[], || {
            let ds = generate_dataset(&self.cfg.synth)?;
            std::fs::create_dir_all(self.run.root().join("data"))?;
            let mut out = Vec::new();
            for (name, seq) in ds.splits() {
                let p = self.run.data(name);
                write_gridset(seq, self.cfg.synth.seed, &p)?;
                out.push(p);
            }
            Ok(out)
        })
    }

    pub fn train_predictor(&self) -> Result<StageOutcome> {
        let section = (&self.cfg.predictor, &self.cfg.predictor_train);
        let inputs = [self.run.data("train"), self.run.data("val")];
        let outcome = self.stage("train-predictor", &section, &inputs, || {
            let train = read_normalized(&self.run.data("train"))?;
            let val = read_normalized(&self.run.data("val"))?;
            let ckpt = self.run.predictor_ckpt();
            std::fs::create_dir_all(ckpt.parent().expect("ckpt dir"))?;
            let log_path = self.run.root().join("ckpt/predictor.log.jsonl");
            let mut log = LineWriter::new(File::create(&log_path)?);
            let (model, _) =
                train_predictor(&train, &val, &self.cfg.predictor, &self.cfg.predictor_train, &self.device, Some(&mut log))?;
            log.flush()?;
            model.checkpoint()?.save(&ckpt)?;
            Ok(vec![ckpt, log_path])
        })?;
        self.record_checkpoint("predictor", &self.run.predictor_ckpt())?;
        Ok(outcome)
    }

    pub fn train_corrector(&self) -> Result<StageOutcome> {
        let section = (&self.cfg.corrector, &self.cfg.edm, &self.cfg.corrector_train);
        let outcome = self.stage("train-corrector", &section, &[self.run.data("train")], || {
            let train = read_normalized(&self.run.data("train"))?;
            let ckpt = self.run.corrector_ckpt();
            std::fs::create_dir_all(ckpt.parent().expect("ckpt dir"))?;
            let log_path = self.run.root().join("ckpt/corrector.log.jsonl");
            let mut log = LineWriter::new(File::create(&log_path)?);
            let (model, _) = train_corrector(
                &train,
                &self.cfg.corrector,
                &self.cfg.edm,
                &self.cfg.corrector_train,
                &self.device,
                Some(&mut log),
            )?;
            log.flush()?;
            model.checkpoint()?.save(&ckpt)?;
            Ok(vec![ckpt, log_path])
        })?;
        self.record_checkpoint("corrector", &self.run.corrector_ckpt())?;
        Ok(outcome)
    }

    fn record_checkpoint(&self, name: &str, path: &Path) -> Result<()> {
        let mut m = self.load_manifest()?;
        m.checkpoints.insert(name.into(), file_digest(path)?);
        self.save_manifest(&mut m)
    }

    fn predictor_inputs(&self) -> Vec<PathBuf> {
        if self.cfg.strategies.needs_predictor_checkpoint() {
            vec![self.run.predictor_ckpt()]
        } else {
            vec![]
        }
    }

    pub fn calibrate(&self) -> Result<StageOutcome> {
        let section = (&self.cfg.calibration, &self.cfg.strategies.forecaster, self.cfg.strategies.lowpass_cutoff);
        let mut inputs = vec![self.run.data("val")];
        inputs.extend(self.predictor_inputs());
        let outcome = self.stage("calibrate", &section, &inputs, || {
            let val = read_normalized(&self.run.data("val"))?;
            let forecaster = forecasters().get(&self.cfg.strategies.forecaster)?(&self.strategy_context())?;
            let calib = calibrate(&val, forecaster.as_ref(), self.cfg.calibration.p)?;
            write_json(&self.run.calib(), &calib)?;
            Ok(vec![self.run.calib()])
        })?;
        let mut m = self.load_manifest()?;
        m.calibration = Some(self.calibration()?);
        self.save_manifest(&mut m)?;
        Ok(outcome)
    }

    pub fn calibration(&self) -> Result<NoiseCalibration> {
        self.run.require(&self.run.calib(), "calibration")?;
        read_json(&self.run.calib())
    }

    /// Test-split indices used as forecast initial states.
    pub fn case_indices(&self, test_len: usize) -> Vec<usize> {
        let all = (0..test_len.saturating_sub(1)).step_by(self.cfg.forecast.stride);
        match self.cfg.forecast.cases {
            0 => all.collect(),
            n => all.take(n).collect(),
        }
    }

    pub fn forecast(&self) -> Result<StageOutcome> {
        let section = (&self.cfg.sample, &self.cfg.forecast, &self.cfg.strategies, &self.cfg.edm.sigma_min);
        let mut inputs = vec![self.run.data("test"), self.run.calib()];
        inputs.extend(self.predictor_inputs());
        if self.cfg.strategies.needs_corrector_checkpoint() {
            inputs.push(self.run.corrector_ckpt());
        }
        let ckpt_inputs: Vec<PathBuf> = inputs[2..].to_vec();
        self.stage("forecast", &section, &inputs, || {
            let test = read_normalized(&self.run.data("test"))?;
            let calib = self.calibration()?;
            let ctx = self.strategy_context();
            let forecaster = forecasters().get(&self.cfg.strategies.forecaster)?(&ctx)?;
            let denoiser = denoisers().get(&self.cfg.strategies.denoiser)?(&ctx)?;
            let sampler = samplers().get(&self.cfg.sample.sampler)?();
            let dir = self.run.forecast_dir();
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
            let mut outputs = Vec::new();
            let mut cases = Vec::new();
            let mut seeds = Vec::new();
            let mut sigma = calib.sigma_global;
            for (case, &i) in self.case_indices(test.len()).iter().enumerate() {
                let ens = ensemble_forecast(
                    forecaster.as_ref(),
                    denoiser.as_ref(),
                    sampler.as_ref(),
                    calib.sigma_global,
                    self.cfg.edm.sigma_min,
                    &test[i],
                    &self.cfg.sample,
                )?;
                log::info!("forecast case {case} (t = {}) done", test[i].time_index);
                sigma = ens.sigma;
                seeds = ens.seeds.clone();
                let case_dir = dir.join(format!("case_{case:03}"));
                let files = write_ensemble(&ens, &case_dir, &self.cfg.fss.variable)?;
                cases.push(ForecastCase {
                    case,
                    init_time_index: test[i].time_index,
                    dir: self.run.rel(&case_dir),
                    members: files.members.iter().map(|p| self.run.rel(p)).collect(),
                });
                outputs.extend(files.all());
            }
            if cases.is_empty() {
                return Err(Error::MissingArtifact("test split too short for any forecast case".into()));
            }
            let manifest = ForecastManifest {
                seeds,
                sigma,
                steps: self.cfg.sample.steps,
                sampler: self.cfg.sample.sampler.clone(),
                forecaster: self.cfg.strategies.forecaster.clone(),
                denoiser: self.cfg.strategies.denoiser.clone(),
                checkpoint_digests: self.digests(&ckpt_inputs)?,
                cases,
            };
            write_json(&self.run.forecast_manifest(), &manifest)?;
            outputs.push(self.run.forecast_manifest());
            Ok(outputs)
        })
    }

    /// Reads back the persisted forecasts in normalized units, paired with their truth.
    pub fn load_forecasts(&self) -> Result<(Vec<EnsembleForecast>, Vec<FieldSet>)> {
        self.run.require(&self.run.forecast_manifest(), "forecast manifest")?;
        let fm: ForecastManifest = read_json(&self.run.forecast_manifest())?;
        let test = read_normalized(&self.run.data("test"))?;
        let mut ens = Vec::new();
        let mut truth = Vec::new();
        for c in &fm.cases {
            let dir = self.run.root().join(&c.dir);
            let load_one = |p: &Path| -> Result<FieldSet> {
                self.run.require(p, "forecast file")?;
                let (_, seq) = read_gridset(p)?;
                normalize(seq.first().ok_or_else(|| Error::corrupt(p, "empty forecast file"))?)
            };
            let predictor_output = load_one(&dir.join("predictor.gset"))?;
            let members = c
                .members
                .iter()
                .map(|m| load_one(&self.run.root().join(m)))
                .collect::<Result<Vec<_>>>()?;
            let t = test
                .iter()
                .find(|s| s.time_index == c.init_time_index + 1)
                .ok_or_else(|| Error::MissingArtifact(format!("truth for case {}", c.case)))?;
            truth.push(t.clone());
            ens.push(EnsembleForecast {
                predictor_output,
                members,
                seeds: fm.seeds.clone(),
                sigma: fm.sigma,
            });
        }
        Ok((ens, truth))
    }

    pub fn verify(&self) -> Result<StageOutcome> {
        let inputs = [self.run.data("test"), self.run.calib(), self.run.forecast_manifest()];
        self.stage("verify", &self.cfg.fss, &inputs, || {
            let (ens, truth) = self.load_forecasts()?;
            let calib = self.calibration()?;
            let cases: Vec<Case<'_>> = ens.iter().zip(&truth).map(|(e, t)| Case { ensemble: e, truth: t }).collect();
            let report = build_report(&cases, &calib, &self.cfg.fss)?;
            write_json(&self.run.report(), &report)?;
            let mut out = vec![self.run.report()];
            out.extend(crate::plots::write_plots(&report, &self.run.report_dir())?);
            Ok(out)
        })
    }

    pub fn report(&self) -> Result<VerificationReport> {
        self.run.require(&self.run.report(), "verification report")?;
        read_json(&self.run.report())
    }

    /// Every stage in order.
    pub fn demo(&self) -> Result<()> {
        self.synth()?;
        if self.cfg.strategies.needs_predictor_checkpoint() {
            self.train_predictor()?;
        }
        if self.cfg.strategies.needs_corrector_checkpoint() {
            self.train_corrector()?;
        }
        self.calibrate()?;
        self.forecast()?;
        self.verify()?;
        Ok(())
    }

    /// Checks that every artifact listed in the manifest exists with its recorded digest.
    pub fn check_manifest(&self) -> Result<()> {
        let m: RunManifest = read_json(&self.run.manifest())?;
        for (p, d) in &m.artifacts {
            let actual = file_digest(&self.run.root().join(p))
                .map_err(|_| Error::MissingArtifact(p.clone()))?;
            if &actual != d {
                return Err(Error::corrupt(self.run.root().join(p), "digest differs from manifest"));
            }
        }
        Ok(())
    }
}

struct EnsembleFiles {
    members: Vec<PathBuf>,
    aggregates: Vec<PathBuf>,
}

impl EnsembleFiles {
    fn all(self) -> Vec<PathBuf> {
        self.members.into_iter().chain(self.aggregates).collect()
    }
}

/// Writes members, predictor output, ensemble mean and (for `pmm_variable`) the PMM, in physical units.
fn write_ensemble(ens: &EnsembleForecast, dir: &Path, pmm_variable: &str) -> Result<EnsembleFiles> {
    std::fs::create_dir_all(dir)?;
    let phys = ens.denormalized()?;
    let mut members = Vec::new();
    for (m, (fs, seed)) in phys.members.iter().zip(&phys.seeds).enumerate() {
        let p = dir.join(format!("member_{m:02}.gset"));
        write_gridset(std::slice::from_ref(fs), *seed, &p)?;
        members.push(p);
    }
    let mut aggregates = Vec::new();
    let pred = dir.join("predictor.gset");
    write_gridset(std::slice::from_ref(&phys.predictor_output), 0, &pred)?;
    aggregates.push(pred);
    let mean = dir.join("ens_mean.gset");
    write_gridset(&[denormalize(&ens.ensemble_mean()?)?], 0, &mean)?;
    aggregates.push(mean);
    if let Some(c) = phys.predictor_output.channel_index(pmm_variable) {
        let field = phys.pmm(c).mapv(|v| v as f32).insert_axis(ndarray::Axis(0));
        let fs = FieldSet::new(
            field,
            vec![phys.predictor_output.specs[c].clone()],
            phys.predictor_output.time_index,
            phys.predictor_output.dt_hours,
        )?;
        let p = dir.join("pmm.gset");
        write_gridset(&[fs], 0, &p)?;
        aggregates.push(p);
    }
    Ok(EnsembleFiles { members, aggregates })
}
