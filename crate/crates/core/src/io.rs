//! Experiment configuration and every persisted artifact: checkpoints, run
//! manifests, rollout logs, sweep tables, benchmark manifests and detector
//! reports. JSON files carry a `format_version`; CSV files always have a
//! header row.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{default_eval_rollouts, SweepAxis, SweepBase, SweepResult};
use crate::error::{Error, Result};
use crate::policy::{Action, ActionDistribution, Activation, Head, PolicyParams, PolicySpec};
use crate::polynomaly::{
    default_trusted_widths, BenchConfig, BenchPolicy, Benchmark, BenchmarkManifest, DetectorConfig, DetectorReport,
    Labeling, RocCurve, Sampling,
};
use crate::rewards::{RewardId, RewardPair, RewardSample};
use crate::rollout::{EnvConfig, EnvKind, RolloutOutcome};
use crate::trainer::{Checkpoint, CheckpointTag, GenerationStats, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format_version: u32,
    #[serde(flatten)]
    body: T,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let v = Versioned {
        format_version: FORMAT_VERSION,
        body: value,
    };
    let mut text = serde_json::to_string_pretty(&v).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    let parse_err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let v: Versioned<T> = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    if v.format_version != FORMAT_VERSION {
        return Err(parse_err(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            v.format_version
        )));
    }
    Ok(v.body)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub proxy: RewardId,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub proxy_weights: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub true_weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default = "default_widths")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Must match the environment when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<Head>,
}

fn default_widths() -> Vec<usize> {
    vec![16, 16]
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            hidden_widths: default_widths(),
            activation: Activation::Tanh,
            head: None,
        }
    }
}

/// Training knobs; anything left out takes the per-environment default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elite_frac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_noise_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollouts_per_eval: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollouts: Option<usize>,
    /// Action quantum applied at rollout time (0 = none).
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_rollouts: Option<usize>,
    /// Phase-transition threshold for sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default)]
    pub sizes: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trusted_widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accept_frac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_frac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_rollouts: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub env: EnvConfig,
    pub reward: RewardSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub bench: BenchSection,
}

impl ExperimentConfig {
    /// Parses TOML; errors carry the line and column of the offending key.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment configs are always representable in TOML")
    }

    pub fn kind(&self) -> EnvKind {
        self.env.kind()
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if let Some(h) = self.policy.head {
            let want = PolicySpec::new(self.kind(), vec![]).head();
            if h != want {
                return Err(Error::Config(format!("{} policies need a {want:?} head", self.kind())));
            }
        }
        self.policy_spec().validate()?;
        self.rewards()?.validate()?;
        self.train_config().validate()?;
        if !(self.eval.epsilon >= 0.0 && self.eval.epsilon.is_finite()) {
            return Err(Error::Config("eval.epsilon must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn rewards(&self) -> Result<RewardPair> {
        let id = self.reward.proxy;
        if id.env() != self.kind() {
            return Err(Error::Config(format!(
                "{id} does not apply to the {} environment",
                self.kind()
            )));
        }
        if id.taxonomy().is_none() {
            return Err(Error::Config(format!("{id} is a true reward, not a proxy")));
        }
        let mut pair = RewardPair::for_proxy(id);
        for (spec, overrides, role) in [
            (&mut pair.proxy, &self.reward.proxy_weights, "proxy"),
            (&mut pair.truth, &self.reward.true_weights, "true"),
        ] {
            for (k, v) in overrides {
                if !spec.weights.contains_key(k) {
                    return Err(Error::Config(format!("unknown {role} weight `{k}` for {}", spec.id)));
                }
                spec.weights.insert(k.clone(), *v);
            }
        }
        Ok(pair)
    }

    pub fn policy_spec(&self) -> PolicySpec {
        let mut spec =
            PolicySpec::new(self.kind(), self.policy.hidden_widths.clone()).with_bounds(self.env.action_bounds());
        spec.activation = self.policy.activation;
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::for_env(self.kind());
        let t = &self.train;
        TrainConfig {
            population: t.population.unwrap_or(d.population),
            elite_frac: t.elite_frac.unwrap_or(d.elite_frac),
            generations: t.generations.unwrap_or(d.generations),
            init_noise_std: t.init_noise_std.unwrap_or(d.init_noise_std),
            noise_decay: t.noise_decay.unwrap_or(d.noise_decay),
            rollouts_per_eval: t.rollouts_per_eval.unwrap_or(d.rollouts_per_eval),
            checkpoint_every: t.checkpoint_every.unwrap_or(d.checkpoint_every),
            seed: self.seed,
        }
    }

    pub fn eval_rollouts(&self) -> usize {
        self.eval.rollouts.unwrap_or_else(|| default_eval_rollouts(self.kind()))
    }

    pub fn theta(&self) -> f64 {
        self.eval.theta.unwrap_or(0.5)
    }

    pub fn sweep_base(&self) -> SweepBase {
        let mut base = SweepBase::new(self.env.clone(), self.policy_spec(), self.train_config());
        base.epsilon = self.eval.epsilon;
        base.eval_rollouts = self.eval_rollouts();
        base
    }

    pub fn bench_config(&self) -> Result<BenchConfig> {
        let b = &self.bench;
        if b.sizes.is_empty() {
            return Err(Error::Config("bench.sizes must list at least one architecture".into()));
        }
        let d = Sampling::default_for(self.kind());
        let dl = Labeling::default();
        let sampling = Sampling {
            r: b.r.unwrap_or(d.r),
            s: b.s.unwrap_or(d.s),
        };
        let labeling = Labeling {
            accept_frac: b.accept_frac.unwrap_or(dl.accept_frac),
            problem_frac: b.problem_frac.unwrap_or(dl.problem_frac),
        };
        labeling.validate()?;
        Ok(BenchConfig {
            env: self.env.clone(),
            rewards: self.rewards()?,
            sizes: b.sizes.clone(),
            trusted_widths: b
                .trusted_widths
                .clone()
                .unwrap_or_else(|| default_trusted_widths(self.reward.proxy)),
            train: self.train_config(),
            labeling,
            sampling,
            label_rollouts: b.label_rollouts.unwrap_or(sampling.r),
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Parameters as 17-significant-digit decimal strings, which round-trip
/// every double exactly.
mod params17 {
    use super::PolicyParams;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &PolicyParams, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<String> = p.0.iter().map(|x| format!("{x:.16e}")).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<PolicyParams, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.iter()
            .map(|t| t.parse::<f64>().map_err(serde::de::Error::custom))
            .collect::<Result<Vec<_>, _>>()
            .map(PolicyParams)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub policy: PolicySpec,
    pub generation: usize,
    pub tags: Vec<CheckpointTag>,
    pub mean_proxy: f64,
    pub mean_true: f64,
    #[serde(with = "params17")]
    pub params: PolicyParams,
}

impl CheckpointFile {
    pub fn new(policy: &PolicySpec, c: &Checkpoint) -> Self {
        Self {
            policy: policy.clone(),
            generation: c.generation,
            tags: c.tags.clone(),
            mean_proxy: c.mean_proxy,
            mean_true: c.mean_true,
            params: c.params.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            generation: self.generation,
            params: self.params.clone(),
            mean_proxy: self.mean_proxy,
            mean_true: self.mean_true,
            tags: self.tags.clone(),
        }
    }

    pub fn bench_policy(&self) -> BenchPolicy {
        BenchPolicy {
            spec: self.policy.clone(),
            params: self.params.clone(),
        }
    }
}

pub fn save_checkpoint(path: &Path, policy: &PolicySpec, c: &Checkpoint) -> Result<()> {
    write_json(path, &CheckpointFile::new(policy, c))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let file: CheckpointFile = read_json(path)?;
    let expected = crate::policy::param_count(&file.policy);
    if file.params.len() != expected {
        return Err(Error::Parse {
            path: path.display().to_string(),
            message: format!("expected {expected} parameters, found {}", file.params.len()),
        });
    }
    Ok(file)
}

/// File name a checkpoint is persisted under inside a run directory.
pub fn checkpoint_name(c: &Checkpoint) -> String {
    if c.has(CheckpointTag::Trained) && !c.has(CheckpointTag::Early) {
        "checkpoint-trained.json".into()
    } else if c.has(CheckpointTag::Early) {
        "checkpoint-early.json".into()
    } else {
        format!("checkpoint-gen{:05}.json", c.generation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCheckpoint {
    pub file: String,
    pub generation: usize,
    pub tags: Vec<CheckpointTag>,
    pub mean_proxy: f64,
    pub mean_true: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub checkpoints: Vec<ManifestCheckpoint>,
    pub training_curve: String,
}

pub fn training_curve_csv(curve: &[GenerationStats]) -> Result<Vec<u8>> {
    csv_bytes(
        &["generation", "mean_proxy", "mean_true"],
        curve
            .iter()
            .map(|s| vec![s.generation.to_string(), num(s.mean_proxy), num(s.mean_true)]),
    )
}

// ---------------------------------------------------------------------------
// Rollout logs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub env: EnvKind,
    pub checkpoint: String,
    pub seed: u64,
    pub horizon: usize,
}

/// One environment step. Agent fields are absent once the agent has left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogStep {
    pub step: usize,
    pub observation: Option<Vec<f64>>,
    pub action: Option<Action>,
    pub distribution: Option<ActionDistribution>,
    pub proxy: f64,
    #[serde(rename = "true")]
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFooter {
    pub totals: RewardSample,
    pub steps: usize,
    pub terminated_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub header: LogHeader,
    pub steps: Vec<LogStep>,
    pub footer: LogFooter,
}

impl RolloutLog {
    /// Builds a log from an outcome recorded with stride 1.
    pub fn from_outcome(header: LogHeader, out: &RolloutOutcome) -> Self {
        let mut records = out.records.iter().peekable();
        let steps = out
            .per_step
            .iter()
            .enumerate()
            .map(|(t, r)| {
                let rec = records.next_if(|rec| rec.step == t);
                LogStep {
                    step: t,
                    observation: rec.map(|x| x.observation.clone()),
                    action: rec.map(|x| x.action),
                    distribution: rec.map(|x| x.distribution.clone()),
                    proxy: r.proxy,
                    truth: r.truth,
                }
            })
            .collect();
        Self {
            header,
            steps,
            footer: LogFooter {
                totals: out.totals,
                steps: out.steps,
                terminated_early: out.terminated_early,
            },
        }
    }

    pub fn step_sums(&self) -> RewardSample {
        let mut s = RewardSample::default();
        for st in &self.steps {
            s += RewardSample {
                proxy: st.proxy,
                truth: st.truth,
            };
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Sweeps

pub fn sweep_csv(result: &SweepResult) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "axis_value",
            "param_count",
            "mean_proxy",
            "mean_true",
            "std_proxy",
            "std_true",
            "trained_generation",
            "checkpoint",
            "error",
        ],
        result.rows.iter().enumerate().map(|(i, r)| {
            let e = r.eval;
            vec![
                r.axis_value.clone(),
                r.param_count.to_string(),
                opt(e.map(|e| e.mean_proxy)),
                opt(e.map(|e| e.mean_true)),
                opt(e.map(|e| e.std_proxy)),
                opt(e.map(|e| e.std_true)),
                opt(r.trained_generation),
                if r.eval.is_some() {
                    sweep_checkpoint_name(i)
                } else {
                    String::new()
                },
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

pub fn sweep_checkpoint_name(row: usize) -> String {
    format!("row{row:02}-trained.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSidecar {
    pub axis: SweepAxis,
    pub base: SweepBase,
    pub rewards: RewardPair,
    pub seed: u64,
    pub theta: f64,
    pub phase_transition: Option<usize>,
    pub result: SweepResult,
}

// ---------------------------------------------------------------------------
// Benchmarks and detector reports

pub fn save_benchmark(dir: &Path, bench: &Benchmark) -> Result<PathBuf> {
    let m = &bench.manifest;
    save_policy(&dir.join(&m.trusted.checkpoint), &bench.trusted, m.trusted.mean_true)?;
    for (e, p) in m.entries.iter().zip(&bench.entries) {
        save_policy(&dir.join(&e.checkpoint), p, e.mean_true)?;
    }
    let path = dir.join("manifest.json");
    write_json(&path, m)?;
    Ok(path)
}

// Benchmark policies carry their labeling true reward; proxy is not tracked.
fn save_policy(path: &Path, p: &BenchPolicy, mean_true: f64) -> Result<()> {
    let c = Checkpoint {
        generation: 0,
        params: p.params.clone(),
        mean_proxy: 0.0,
        mean_true,
        tags: vec![CheckpointTag::Trained],
    };
    save_checkpoint(path, &p.spec, &c)
}

/// Reads a manifest and the checkpoints it names, resolved relative to the
/// manifest's directory.
pub fn load_benchmark(manifest_path: &Path) -> Result<Benchmark> {
    let manifest: BenchmarkManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let trusted = load_checkpoint(&dir.join(&manifest.trusted.checkpoint))?.bench_policy();
    let entries = manifest
        .entries
        .iter()
        .map(|e| load_checkpoint(&dir.join(&e.checkpoint)).map(|c| c.bench_policy()))
        .collect::<Result<_>>()?;
    if manifest.entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(Benchmark {
        manifest,
        trusted,
        entries,
    })
}

/// Everything `bench detect` produced for one manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRun {
    pub manifest: String,
    pub seed: u64,
    pub reports: Vec<DetectorReport>,
}

pub fn roc_csv(roc: &RocCurve) -> Result<Vec<u8>> {
    csv_bytes(
        &["threshold", "fpr", "tpr"],
        roc.points
            .iter()
            .map(|p| vec![opt(p.threshold), num(p.fpr), num(p.tpr)]),
    )
}

pub fn scores_csv(report: &DetectorReport) -> Result<Vec<u8>> {
    csv_bytes(
        &["checkpoint", "label", "mean_true", "score"],
        report.scores.iter().map(|s| {
            vec![
                s.checkpoint.clone(),
                format!("{:?}", s.label).to_lowercase(),
                num(s.mean_true),
                num(s.score),
            ]
        }),
    )
}

/// One row per subtask, an `auroc` / `max_f1` column pair per detector.
pub fn table_csv(reports: &[DetectorReport]) -> Result<Vec<u8>> {
    let detectors: Vec<String> = DetectorConfig::all().iter().map(|d| d.name()).collect();
    let mut extra: Vec<String> = reports
        .iter()
        .map(|r| r.detector.clone())
        .filter(|d| !detectors.contains(d))
        .collect();
    extra.sort();
    extra.dedup();
    let detectors: Vec<String> = detectors.into_iter().chain(extra).collect();
    let mut subtasks: Vec<String> = Vec::new();
    for r in reports {
        if !subtasks.contains(&r.subtask) {
            subtasks.push(r.subtask.clone());
        }
    }
    let mut header = vec!["subtask".to_string()];
    for d in &detectors {
        header.push(format!("{d}_auroc"));
        header.push(format!("{d}_max_f1"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = subtasks.iter().map(|t| {
        let mut row = vec![t.clone()];
        for d in &detectors {
            // The last report for a (subtask, detector) pair wins.
            let roc = reports
                .iter()
                .rev()
                .find(|r| &r.subtask == t && &r.detector == d)
                .and_then(|r| r.roc.as_ref());
            row.push(opt(roc.map(|x| x.auroc)));
            row.push(opt(roc.map(|x| x.max_f1)));
        }
        row
    });
    csv_bytes(&header_refs, rows)
}
