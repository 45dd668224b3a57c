//! Reproducible experiment pipeline over a content-addressed artifact store.
//!
//! Stages form a fixed graph:
//!
//! ```text
//! pretrain -> finetune -> { sweep_omega, sweep_lambda, compare } -> report
//! ```
//!
//! Each stage's outputs are stored under `<store>/<stage>/<key>/`, where the
//! key hashes the stage name, the config subtree the stage reads and the
//! hashes of its input artifacts. A stage whose key is present and whose
//! stored files still match their recorded hashes is skipped; anything else
//! is (re)executed. Every run copies the outputs of the requested stages into
//! the output directory and writes `manifest.json` there.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::datasets::{make_pretrain_spec, make_target_spec, sample_dataset, Condition, GmmSpec, LabeledSamples};
use crate::denoiser::{checkpoint, ParamVector};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalInputs, EvalTarget, SweepTable};
use crate::guidance::{GuidanceConfig, Method, MethodSpec, ModelPair};
use crate::io::{self, parse_csv, sha256_hex, Csv};
use crate::plot;
use crate::sampler::{ode_sample, SampleRun};
use crate::training;

/// Environment variable naming the artifact-store root.
pub const STORE_ENV: &str = "PGUIDE_STORE";

pub const MANIFEST_FILE: &str = "manifest.json";

/// Bumped whenever stage outputs change meaning, so old cache entries miss.
const STAGE_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Pretrain,
    Finetune,
    SweepOmega,
    SweepLambda,
    Compare,
    Report,
}

impl StageName {
    pub const ALL: [StageName; 6] = [
        StageName::Pretrain,
        StageName::Finetune,
        StageName::SweepOmega,
        StageName::SweepLambda,
        StageName::Compare,
        StageName::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StageName::Pretrain => "pretrain",
            StageName::Finetune => "finetune",
            StageName::SweepOmega => "sweep_omega",
            StageName::SweepLambda => "sweep_lambda",
            StageName::Compare => "compare",
            StageName::Report => "report",
        }
    }

    pub fn dependencies(&self) -> &'static [StageName] {
        use StageName::*;
        match self {
            Pretrain => &[],
            Finetune => &[Pretrain],
            SweepOmega | SweepLambda | Compare => &[Finetune],
            Report => &[SweepOmega, SweepLambda, Compare],
        }
    }

    /// `targets` plus everything they depend on, in execution order.
    pub fn closure(targets: &[StageName]) -> Vec<StageName> {
        let mut need = std::collections::BTreeSet::new();
        let mut stack: Vec<StageName> = targets.to_vec();
        while let Some(s) = stack.pop() {
            if need.insert(s) {
                stack.extend_from_slice(s.dependencies());
            }
        }
        need.into_iter().collect()
    }
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub name: String,
    pub sha256: String,
}

/// What the store remembers about one executed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageName,
    pub key: String,
    pub config_hash: String,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    pub created_unix: u64,
}

impl StageRecord {
    pub fn output(&self, name: &str) -> Result<&ArtifactRef> {
        self.outputs
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("stage {} has no output {name}", self.stage)))
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Store { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, stage: StageName, key: &str) -> PathBuf {
        self.root.join(stage.as_str()).join(key)
    }

    fn record_path(&self, stage: StageName, key: &str) -> PathBuf {
        self.dir(stage, key).join("record.json")
    }

    pub fn artifact_path(&self, record: &StageRecord, name: &str) -> PathBuf {
        self.dir(record.stage, &record.key).join(name)
    }

    /// The stored record for `(stage, key)` if present and intact.
    ///
    /// A record whose files are missing or no longer match their hashes is
    /// reported as [`Lookup::Corrupt`] so the caller can re-execute.
    pub fn lookup(&self, stage: StageName, key: &str) -> Result<Lookup> {
        let path = self.record_path(stage, key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Lookup::Missing),
            Err(e) => return Err(Error::io(path, e)),
        };
        let record: StageRecord = match serde_json::from_str(&text) {
            Ok(r) => r,
            Err(e) => return Ok(Lookup::Corrupt(format!("unreadable record: {e}"))),
        };
        for a in &record.outputs {
            let p = self.artifact_path(&record, &a.name);
            match fs::read(&p) {
                Ok(bytes) if sha256_hex(&bytes) == a.sha256 => {}
                Ok(_) => return Ok(Lookup::Corrupt(format!("{} hash mismatch", a.name))),
                Err(_) => return Ok(Lookup::Corrupt(format!("{} missing", a.name))),
            }
        }
        Ok(Lookup::Hit(record))
    }

    /// Writes the outputs, then the record; a crash in between leaves no record.
    pub fn commit(
        &self,
        stage: StageName,
        key: &str,
        config_hash: &str,
        inputs: Vec<ArtifactRef>,
        files: &[(String, Vec<u8>)],
    ) -> Result<StageRecord> {
        let dir = self.dir(stage, key);
        let mut outputs = Vec::with_capacity(files.len());
        for (name, bytes) in files {
            io::write_atomic(&dir.join(name), bytes)?;
            outputs.push(ArtifactRef {
                name: name.clone(),
                sha256: sha256_hex(bytes),
            });
        }
        let record = StageRecord {
            stage,
            key: key.to_string(),
            config_hash: config_hash.to_string(),
            inputs,
            outputs,
            created_unix: now_unix(),
        };
        io::write_atomic(&self.record_path(stage, key), serde_json::to_string_pretty(&record)?.as_bytes())?;
        Ok(record)
    }

    pub fn read(&self, record: &StageRecord, name: &str) -> Result<Vec<u8>> {
        let p = self.artifact_path(record, name);
        fs::read(&p).map_err(|e| Error::io(p, e))
    }

    pub fn read_string(&self, record: &StageRecord, name: &str) -> Result<String> {
        String::from_utf8(self.read(record, name)?)
            .map_err(|_| Error::InvalidArgument(format!("{name} is not utf-8")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lookup {
    Missing,
    Corrupt(String),
    Hit(StageRecord),
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStage {
    pub stage: StageName,
    pub key: String,
    pub config_hash: String,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<OutputFile>,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config_file: OutputFile,
    pub stages: Vec<ManifestStage>,
    pub written_unix: u64,
}

impl ExperimentManifest {
    pub fn load(out_dir: &Path) -> Result<Self> {
        let p = out_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn stage(&self, name: StageName) -> Option<&ManifestStage> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// Every listed file exists with its recorded hash, and stages appear
    /// after all of their dependencies.
    pub fn check(&self, out_dir: &Path) -> Result<()> {
        let files = std::iter::once(&self.config_file).chain(self.stages.iter().flat_map(|s| &s.outputs));
        for f in files {
            let p = out_dir.join(&f.path);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(Error::InvalidArgument(format!("{} does not match its manifest hash", f.path)));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            for dep in s.stage.dependencies() {
                match self.stages.iter().position(|t| t.stage == *dep) {
                    Some(j) if j < i => {}
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "stage {} is listed without its dependency {dep} before it",
                            s.stage
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// The manifest with volatile timestamps zeroed, for comparisons.
    pub fn without_timestamps(&self) -> Self {
        let mut m = self.clone();
        m.written_unix = 0;
        for s in &mut m.stages {
            s.created_unix = 0;
        }
        m
    }
}

/// Specs, target data and evaluation inputs derived from one config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub pretrain_spec: GmmSpec,
    pub target_spec: GmmSpec,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let pretrain_spec = make_pretrain_spec(&config.data)?;
        let target_spec = make_target_spec(&config.data)?;
        Ok(Experiment {
            config,
            pretrain_spec,
            target_spec,
        })
    }

    /// The fine-tuning set: base-attribute draws of the target concept.
    pub fn target_data(&self) -> Result<LabeledSamples> {
        let base = self.config.data.base_condition();
        sample_dataset(&self.target_spec, self.config.data.target.n_points, self.config.seed, Some(&base))
    }

    pub fn eval_inputs(&self) -> Result<EvalInputs> {
        Ok(EvalInputs {
            target: EvalTarget::new(&self.target_spec, self.config.requested_condition())?,
            sampler: self.config.sampling.clone(),
            seed: self.config.seed,
        })
    }

    pub fn requested(&self) -> Condition {
        self.config.requested_condition()
    }

    /// Default-scale guidance for each method, as used by the headline table.
    pub fn headline_guidance(&self) -> Vec<GuidanceConfig> {
        let g = &self.config.guidance;
        vec![
            GuidanceConfig::cfg(g.cfg_lambda),
            GuidanceConfig::pg(g.pg_lambda, g.pg_omega),
            GuidanceConfig::ag(g.ag_lambda),
        ]
    }
}

/// Which stages ran and where their outputs went.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub manifest: ExperimentManifest,
    pub executed: Vec<StageName>,
    pub out_dir: PathBuf,
}

impl PipelineRun {
    pub fn path(&self, stage: StageName, file: &str) -> PathBuf {
        self.out_dir.join(stage.as_str()).join(file)
    }
}

pub struct Pipeline {
    exp: Experiment,
    store: Store,
    out_dir: PathBuf,
}

type Files = Vec<(String, Vec<u8>)>;

impl Pipeline {
    pub fn new(config: ExperimentConfig, store: Store, out_dir: impl Into<PathBuf>) -> Result<Self> {
        Ok(Pipeline {
            exp: Experiment::new(config)?,
            store,
            out_dir: out_dir.into(),
        })
    }

    pub fn experiment(&self) -> &Experiment {
        &self.exp
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.exp.config.to_toml().as_bytes())
    }

    /// Runs `targets` and their dependencies, executing only stages whose
    /// cache entry is missing or corrupt.
    pub fn run(&self, targets: &[StageName]) -> Result<PipelineRun> {
        let order = StageName::closure(targets);
        let mut records: Vec<StageRecord> = Vec::new();
        let mut executed = Vec::new();
        for stage in order {
            let inputs: Vec<ArtifactRef> = stage
                .dependencies()
                .iter()
                .flat_map(|d| {
                    let r = records.iter().find(|r| r.stage == *d).expect("dependency ran first");
                    r.outputs.iter().map(move |a| ArtifactRef {
                        name: format!("{d}/{}", a.name),
                        sha256: a.sha256.clone(),
                    })
                })
                .collect();
            let subtree = self.subtree(stage);
            let config_hash = sha256_hex(serde_json::to_string(&subtree)?.as_bytes());
            let key = sha256_hex(
                serde_json::to_string(&json!({
                    "format": STAGE_FORMAT,
                    "stage": stage.as_str(),
                    "config": subtree,
                    "inputs": inputs,
                }))?
                .as_bytes(),
            );
            let record = match self.store.lookup(stage, &key)? {
                Lookup::Hit(r) => {
                    log::info!("stage {stage}: cached ({})", &key[..12]);
                    r
                }
                other => {
                    if let Lookup::Corrupt(why) = &other {
                        log::warn!("stage {stage}: cache entry corrupt ({why}); re-executing");
                    }
                    log::info!("stage {stage}: executing");
                    let files = self.execute(stage, &records).map_err(|e| Error::Stage {
                        stage: stage.as_str().into(),
                        message: e.to_string(),
                        config: subtree.to_string(),
                    })?;
                    executed.push(stage);
                    self.store.commit(stage, &key, &config_hash, inputs, &files)?
                }
            };
            records.push(record);
        }
        let manifest = self.export(&records)?;
        Ok(PipelineRun {
            manifest,
            executed,
            out_dir: self.out_dir.clone(),
        })
    }

    /// Config sections each stage reads. The seed and the data section feed
    /// every stage.
    fn subtree(&self, stage: StageName) -> Value {
        let c = &self.exp.config;
        let base = json!({ "seed": c.seed, "data": c.data });
        let extra = match stage {
            StageName::Pretrain => json!({ "model": c.model, "pretrain": c.pretrain }),
            StageName::Finetune => json!({ "finetune": c.finetune }),
            StageName::SweepOmega => json!({ "sampling": c.sampling, "eval": c.eval, "sweep_omega": c.sweep_omega }),
            StageName::SweepLambda => json!({ "sampling": c.sampling, "eval": c.eval, "sweep_lambda": c.sweep_lambda }),
            StageName::Compare => json!({
                "sampling": c.sampling, "eval": c.eval, "compare": c.compare, "guidance": c.guidance,
            }),
            StageName::Report => json!({ "eval": c.eval, "guidance": c.guidance }),
        };
        json!({ "base": base, "stage": extra })
    }

    fn find(records: &[StageRecord], stage: StageName) -> &StageRecord {
        records.iter().find(|r| r.stage == stage).expect("dependency ran first")
    }

    fn load_params(&self, records: &[StageRecord], stage: StageName, name: &str) -> Result<ParamVector> {
        let r = Self::find(records, stage);
        checkpoint::decode(&self.store.read(r, name)?, &self.store.artifact_path(r, name))
    }

    fn model_pair(&self, records: &[StageRecord]) -> Result<ModelPair> {
        ModelPair::new(
            self.load_params(records, StageName::Pretrain, "theta.ckpt")?,
            self.load_params(records, StageName::Finetune, "theta_prime.ckpt")?,
        )
    }

    fn execute(&self, stage: StageName, records: &[StageRecord]) -> Result<Files> {
        let c = &self.exp.config;
        let requested = self.exp.requested();
        match stage {
            StageName::Pretrain => {
                let out = training::pretrain(&self.exp.pretrain_spec, &c.architecture(), &c.pretrain_config())?;
                let fit = evaluation::score_fit_mse(&out.params, &self.exp.pretrain_spec, 0.5, 41)?;
                log::info!("pretrain: score-fit MSE at sigma 0.5 = ({:.4}, {:.4})", fit[0], fit[1]);
                Ok(vec![
                    ("theta.ckpt".into(), checkpoint::encode(&out.params)),
                    ("loss.csv".into(), out.loss_csv().into_bytes()),
                ])
            }
            StageName::Finetune => {
                let theta = self.load_params(records, StageName::Pretrain, "theta.ckpt")?;
                let data = self.exp.target_data()?;
                let out = training::finetune(&theta, &data, &c.finetune_config())?;
                Ok(vec![
                    ("theta_prime.ckpt".into(), checkpoint::encode(&out.params)),
                    ("loss.csv".into(), out.loss_csv().into_bytes()),
                    ("target_data.csv".into(), labeled_csv(&data).into_bytes()),
                ])
            }
            StageName::SweepOmega => {
                let pair = self.model_pair(records)?;
                let table = evaluation::sweep_omega(&pair, c.sweep_omega.lambda, &c.sweep_omega.grid, &self.exp.eval_inputs()?)?;
                let csv = table.to_csv(&requested);
                let svg = plot::line_panels(&sweep_panels(&csv)?)?;
                Ok(vec![("sweep_omega.csv".into(), csv.into_bytes()), ("sweep_omega.svg".into(), svg.into_bytes())])
            }
            StageName::SweepLambda => {
                let pair = self.model_pair(records)?;
                let csv = method_grid_csv(&pair, &c.sweep_lambda.methods, &c.sweep_lambda.grid, &self.exp.eval_inputs()?)?;
                let svg = plot::line_panels(&sweep_panels(&csv)?)?;
                Ok(vec![("sweep_lambda.csv".into(), csv.into_bytes()), ("sweep_lambda.svg".into(), svg.into_bytes())])
            }
            StageName::Compare => {
                let pair = self.model_pair(records)?;
                let inputs = self.exp.eval_inputs()?;
                let csv = method_grid_csv(&pair, &c.compare.methods, &c.compare.lambdas, &inputs)?;
                let svg = plot::line_panels(&sweep_panels(&csv)?)?;
                let headline = headline_csv(&pair, &self.exp.headline_guidance(), &inputs)?;
                Ok(vec![
                    ("compare.csv".into(), csv.into_bytes()),
                    ("compare.svg".into(), svg.into_bytes()),
                    ("headline.csv".into(), headline.into_bytes()),
                ])
            }
            StageName::Report => {
                let read = |stage, name| self.store.read_string(Self::find(records, stage), name);
                let summary = Summary::from_tables(
                    &self.exp,
                    &read(StageName::SweepOmega, "sweep_omega.csv")?,
                    &read(StageName::SweepLambda, "sweep_lambda.csv")?,
                    &read(StageName::Compare, "headline.csv")?,
                )?;
                Ok(vec![
                    ("summary.txt".into(), summary.to_text().into_bytes()),
                    ("summary.json".into(), serde_json::to_string_pretty(&summary)?.into_bytes()),
                ])
            }
        }
    }

    /// Copies stage outputs into the output directory and writes the manifest.
    fn export(&self, records: &[StageRecord]) -> Result<ExperimentManifest> {
        let config_text = self.exp.config.to_toml();
        io::write_atomic(&self.out_dir.join("config.toml"), config_text.as_bytes())?;
        let mut stages = Vec::new();
        for r in records {
            let mut outputs = Vec::new();
            for a in &r.outputs {
                let rel = format!("{}/{}", r.stage, a.name);
                let bytes = self.store.read(r, &a.name)?;
                if sha256_hex(&bytes) != a.sha256 {
                    return Err(Error::InvalidArgument(format!("store artifact {rel} changed during the run")));
                }
                io::write_atomic(&self.out_dir.join(&rel), &bytes)?;
                outputs.push(OutputFile {
                    path: rel,
                    sha256: a.sha256.clone(),
                });
            }
            stages.push(ManifestStage {
                stage: r.stage,
                key: r.key.clone(),
                config_hash: r.config_hash.clone(),
                inputs: r.inputs.clone(),
                outputs,
                created_unix: r.created_unix,
            });
        }
        let manifest = ExperimentManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: sha256_hex(config_text.as_bytes()),
            config_file: OutputFile {
                path: "config.toml".into(),
                sha256: sha256_hex(config_text.as_bytes()),
            },
            stages,
            written_unix: now_unix(),
        };
        io::write_atomic(
            &self.out_dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(manifest)
    }

    /// Trained pair, running (or reusing) the training stages.
    pub fn models(&self) -> Result<(ModelPair, PipelineRun)> {
        let run = self.run(&[StageName::Finetune])?;
        let records: Vec<StageRecord> = [StageName::Pretrain, StageName::Finetune]
            .iter()
            .map(|s| {
                let m = run.manifest.stage(*s).expect("stage ran");
                match self.store.lookup(*s, &m.key)? {
                    Lookup::Hit(r) => Ok(r),
                    _ => Err(Error::InvalidArgument(format!("stage {s} vanished from the store"))),
                }
            })
            .collect::<Result<_>>()?;
        Ok((self.model_pair(&records)?, run))
    }

    /// Guided samples of the requested condition with the trained pair.
    pub fn sample(&self, guidance: GuidanceConfig, trajectories: bool) -> Result<SampleRun> {
        guidance.validate()?;
        let (pair, _) = self.models()?;
        let model = pair.guided(guidance)?;
        let s = &self.exp.config.sampling;
        ode_sample(
            &model,
            &s.schedule()?,
            s.integrator,
            s.n_samples,
            &self.exp.requested(),
            self.exp.config.seed,
            trajectories,
        )
    }
}

fn labeled_csv(data: &LabeledSamples) -> String {
    let mut csv = Csv::with_header(&["index", "x0", "x1", "concept", "attribute", "seed"]);
    for (i, (p, c)) in data.points.iter().zip(&data.conditions).enumerate() {
        csv.row([
            i.to_string(),
            p[0].to_string(),
            p[1].to_string(),
            c.concept().map(|v| v.to_string()).unwrap_or_default(),
            c.attribute().map(|v| v.to_string()).unwrap_or_default(),
            data.seed.to_string(),
        ]);
    }
    csv.into_string()
}

/// λ sweeps for several methods concatenated into one table
/// (`|methods| x |grid|` rows, method-major).
pub fn method_grid_csv(pair: &ModelPair, methods: &[MethodSpec], grid: &[f64], inputs: &EvalInputs) -> Result<String> {
    let mut out = String::new();
    for (i, m) in methods.iter().enumerate() {
        let table: SweepTable = evaluation::sweep_lambda(pair, *m, grid, inputs)?;
        let csv = table.to_csv(&inputs.target.requested);
        let body = if i == 0 { &csv[..] } else { csv.split_once('\n').map_or("", |x| x.1) };
        out.push_str(body);
    }
    Ok(out)
}

/// One row per guidance config, in sweep-table layout with `swept = headline`.
pub fn headline_csv(pair: &ModelPair, configs: &[GuidanceConfig], inputs: &EvalInputs) -> Result<String> {
    let mut header: Vec<&str> = evaluation::SWEEP_CSV_HEADER.to_vec();
    header.push("seed");
    let mut csv = Csv::with_header(&header);
    for g in configs {
        let report = evaluation::run_guided(pair, *g, inputs)?;
        csv.row(evaluation::sweep_fields(
            "headline",
            g.lambda,
            g,
            &inputs.target.requested,
            &inputs.sampler,
            &report,
        ));
    }
    Ok(csv.into_string())
}

/// Rows of a sweep-layout CSV, keyed by column name.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCsvRow {
    pub swept: String,
    pub value: f64,
    pub guidance: GuidanceConfig,
    pub subject_fidelity: f64,
    pub attribute_fidelity: f64,
    pub energy_distance: f64,
}

impl SweepCsvRow {
    /// Series label: the method, with ω for PG rows of a λ sweep and λ for
    /// an ω sweep.
    pub fn series(&self) -> String {
        let g = &self.guidance;
        match (self.swept.as_str(), g.method) {
            ("omega", _) => format!("{}(lambda={})", g.method, g.lambda),
            (_, Method::Pg) => format!("pg(omega={})", g.omega),
            _ => g.method.to_string(),
        }
    }
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepCsvRow>> {
    let (header, rows) = parse_csv(text)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("csv has no `{name}` column")))
    };
    let (sw, va, me, la, om) = (col("swept")?, col("value")?, col("method")?, col("lambda")?, col("omega")?);
    let (sf, af, ed) = (col("subject_fidelity")?, col("attribute_fidelity")?, col("energy_distance")?);
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("`{s}` is not a number")))
    };
    rows.iter()
        .map(|r| {
            Ok(SweepCsvRow {
                swept: r[sw].clone(),
                value: num(&r[va])?,
                guidance: GuidanceConfig {
                    method: r[me].parse()?,
                    lambda: num(&r[la])?,
                    omega: num(&r[om])?,
                },
                subject_fidelity: num(&r[sf])?,
                attribute_fidelity: num(&r[af])?,
                energy_distance: num(&r[ed])?,
            })
        })
        .collect()
}

/// Subject, attribute and energy panels for a sweep-layout CSV, one series
/// per method (in order of first appearance).
pub fn sweep_panels(text: &str) -> Result<Vec<plot::Panel>> {
    let rows = parse_sweep_csv(text)?;
    let swept = rows.first().map(|r| r.swept.clone()).unwrap_or_else(|| "value".into());
    let mut names: Vec<String> = Vec::new();
    for r in &rows {
        if !names.contains(&r.series()) {
            names.push(r.series());
        }
    }
    let panel = |title: &str, f: &dyn Fn(&SweepCsvRow) -> f64| plot::Panel {
        title: title.into(),
        x_label: swept.clone(),
        y_label: title.into(),
        series: names
            .iter()
            .map(|n| plot::Series {
                name: n.clone(),
                points: rows.iter().filter(|r| &r.series() == n).map(|r| (r.value, f(r))).collect(),
            })
            .collect(),
    };
    Ok(vec![
        panel("subject fidelity", &|r| r.subject_fidelity),
        panel("attribute fidelity", &|r| r.attribute_fidelity),
        panel("energy distance", &|r| r.energy_distance),
    ])
}

/// A named directional check of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub selected_omega: f64,
    pub spearman_omega_attribute: f64,
    pub spearman_omega_subject: f64,
    pub headline: Vec<(String, f64, f64)>,
    pub checks: Vec<Check>,
}

impl Summary {
    pub fn from_tables(exp: &Experiment, omega_csv: &str, lambda_csv: &str, headline_csv: &str) -> Result<Self> {
        let omega = parse_sweep_csv(omega_csv)?;
        let lambda = parse_sweep_csv(lambda_csv)?;
        let head = parse_sweep_csv(headline_csv)?;
        let ws: Vec<f64> = omega.iter().map(|r| r.value).collect();
        let subj: Vec<f64> = omega.iter().map(|r| r.subject_fidelity).collect();
        let attr: Vec<f64> = omega.iter().map(|r| r.attribute_fidelity).collect();
        let rho_attr = evaluation::spearman(&ws, &attr)?;
        let rho_subj = evaluation::spearman(&ws, &subj)?;
        let mut best = 0;
        for i in 1..omega.len() {
            if omega[i].subject_fidelity >= omega[best].subject_fidelity {
                best = i;
            }
        }
        let by = |m: Method| head.iter().find(|r| r.guidance.method == m);
        let mut checks = Vec::new();
        let mut check = |name: &str, passed: bool, detail: String| {
            checks.push(Check {
                name: name.into(),
                passed,
                detail,
            })
        };
        if let (Some(cfg), Some(pg), Some(ag)) = (by(Method::Cfg), by(Method::Pg), by(Method::Ag)) {
            check(
                "pg subject fidelity above cfg",
                pg.subject_fidelity > cfg.subject_fidelity,
                format!("{:.4} vs {:.4}", pg.subject_fidelity, cfg.subject_fidelity),
            );
            check(
                "cfg attribute fidelity at least pg",
                cfg.attribute_fidelity >= pg.attribute_fidelity,
                format!("{:.4} vs {:.4}", cfg.attribute_fidelity, pg.attribute_fidelity),
            );
            check(
                "ag attribute fidelity at most cfg",
                ag.attribute_fidelity <= cfg.attribute_fidelity,
                format!("{:.4} vs {:.4}", ag.attribute_fidelity, cfg.attribute_fidelity),
            );
        }
        check("omega vs attribute rank correlation >= 0", rho_attr >= 0.0, format!("{rho_attr:.4}"));
        check("omega vs subject rank correlation <= 0", rho_subj <= 0.0, format!("{rho_subj:.4}"));
        let g = &exp.config.guidance;
        for m in [Method::Cfg, Method::Pg] {
            let default = if m == Method::Cfg { g.cfg_lambda } else { g.pg_lambda };
            let at = |l: f64| {
                lambda
                    .iter()
                    .find(|r| r.guidance.method == m && r.guidance.lambda == l && (m != Method::Pg || r.guidance.omega == g.pg_omega))
                    .map(|r| r.attribute_fidelity)
            };
            if let (Some(a1), Some(ad)) = (at(1.0), at(default)) {
                check(
                    &format!("{m} attribute fidelity rises from lambda 1 to {default}"),
                    ad > a1,
                    format!("{ad:.4} vs {a1:.4}"),
                );
            }
        }
        Ok(Summary {
            seed: exp.config.seed,
            selected_omega: omega.get(best).map_or(f64::NAN, |r| r.value),
            spearman_omega_attribute: rho_attr,
            spearman_omega_subject: rho_subj,
            headline: head
                .iter()
                .map(|r| (r.guidance.to_string(), r.subject_fidelity, r.attribute_fidelity))
                .collect(),
            checks,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("seed {}\nselected omega {}\n", self.seed, self.selected_omega);
        s.push_str(&format!(
            "spearman(omega, attribute) {:.4}\nspearman(omega, subject) {:.4}\n\nheadline\n",
            self.spearman_omega_attribute, self.spearman_omega_subject
        ));
        for (g, sf, af) in &self.headline {
            s.push_str(&format!("  {g:<28} subject {sf:>9.4}  attribute {af:.4}\n"));
        }
        s.push_str("\nchecks\n");
        for c in &self.checks {
            s.push_str(&format!("  [{}] {} ({})\n", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail));
        }
        s
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closure_is_topological() {
        assert_eq!(StageName::closure(&[StageName::Pretrain]), vec![StageName::Pretrain]);
        assert_eq!(
            StageName::closure(&[StageName::Compare]),
            vec![StageName::Pretrain, StageName::Finetune, StageName::Compare]
        );
        assert_eq!(StageName::closure(&[StageName::Report]), StageName::ALL.to_vec());
    }

    #[test]
    fn store_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        assert_eq!(store.lookup(StageName::Pretrain, "k").unwrap(), Lookup::Missing);
        let rec = store
            .commit(StageName::Pretrain, "k", "c", vec![], &[("a.bin".into(), vec![1, 2, 3])])
            .unwrap();
        assert_eq!(store.lookup(StageName::Pretrain, "k").unwrap(), Lookup::Hit(rec.clone()));
        fs::write(store.artifact_path(&rec, "a.bin"), [9u8]).unwrap();
        assert!(matches!(store.lookup(StageName::Pretrain, "k").unwrap(), Lookup::Corrupt(_)));
        fs::remove_file(store.artifact_path(&rec, "a.bin")).unwrap();
        assert!(matches!(store.lookup(StageName::Pretrain, "k").unwrap(), Lookup::Corrupt(_)));
    }

    #[test]
    fn sweep_csv_roundtrip_and_series_names() {
        let text = "swept,value,method,lambda,omega,subject_fidelity,attribute_fidelity,energy_distance\n\
                    lambda,1,pg,1,0,-1.5,0.5,0.1\n\
                    lambda,1,cfg,1,1,-2,0.75,0.2\n\
                    omega,0.5,pg,7.5,0.5,-3,1,0.3\n";
        let rows = parse_sweep_csv(text).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].series(), "pg(omega=0)");
        assert_eq!(rows[1].series(), "cfg");
        assert_eq!(rows[2].series(), "pg(lambda=7.5)");
        assert_eq!(rows[1].guidance, GuidanceConfig::cfg(1.0));
        let panels = sweep_panels(text).unwrap();
        assert_eq!(panels.len(), 3);
        assert_eq!(panels[0].series.len(), 3);
        assert!(parse_sweep_csv("swept,value\nx,1\n").is_err());
    }

    #[test]
    fn manifest_check_catches_edits_and_misordering() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.toml"), "x").unwrap();
        fs::create_dir_all(dir.path().join("pretrain")).unwrap();
        fs::write(dir.path().join("pretrain/a"), "a").unwrap();
        let file = |p: &str, c: &str| OutputFile {
            path: p.into(),
            sha256: sha256_hex(c.as_bytes()),
        };
        let stage = |s| ManifestStage {
            stage: s,
            key: "k".into(),
            config_hash: "c".into(),
            inputs: vec![],
            outputs: vec![],
            created_unix: 1,
        };
        let mut m = ExperimentManifest {
            tool_version: "0".into(),
            config_hash: "c".into(),
            config_file: file("config.toml", "x"),
            stages: vec![ManifestStage {
                outputs: vec![file("pretrain/a", "a")],
                ..stage(StageName::Pretrain)
            }],
            written_unix: 5,
        };
        m.check(dir.path()).unwrap();
        assert_eq!(m.without_timestamps().written_unix, 0);
        m.stages.insert(0, stage(StageName::Finetune));
        assert!(m.check(dir.path()).is_err());
        m.stages.remove(0);
        fs::write(dir.path().join("pretrain/a"), "b").unwrap();
        assert!(m.check(dir.path()).is_err());
    }
}
