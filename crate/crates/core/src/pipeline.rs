//! End-to-end runs: configuration, staged execution with an on-disk stage
//! cache, the ablation grid, standalone embed/eval steps and 2-D export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, Averaging, ClusterReport};
use crate::data::{
    self, load_matrix, make_batches, synth_blobs, synth_union_of_subspaces, train_test_split, BatchPlan, BlobSpec,
    DataBatch, Dataset, MatrixFormat, Pca, SubspaceSpec, TextOptions,
};
use crate::error::{Error, Result};
use crate::nn::{
    checkpoint, geometric_sizes, pretrain_autoencoder, train_sadse, Activation, Autoencoder, EpochLoss, LossBreakdown,
    LossVariant, LossWeights, OptimizerConfig, StructureMatrix, TrainOptions,
};
use crate::selfexpr::{
    knn_sparsify, lasso_selfexpr, self_expression, train_attention, AttentionNets, AttentionTraining, ElasticConfig,
};
use crate::spectral::{batch_targets, SigmaPolicy, SpectralTarget, DEFAULT_ZERO_TOL};

// ---------------------------------------------------------------------------
// Configuration

/// `F` clusters the data the model was trained on; `T` trains on a split and
/// clusters the held-out part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EvalMode {
    #[default]
    #[serde(rename = "F")]
    Full,
    #[serde(rename = "T")]
    Test,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Full => "F",
            EvalMode::Test => "T",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F" | "f" | "full" => Some(EvalMode::Full),
            "T" | "t" | "test" => Some(EvalMode::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelfExprMode {
    #[default]
    Attention,
    Lasso,
}

impl SelfExprMode {
    pub const ALL: [SelfExprMode; 2] = [SelfExprMode::Attention, SelfExprMode::Lasso];

    pub fn name(self) -> &'static str {
        match self {
            SelfExprMode::Attention => "attention",
            SelfExprMode::Lasso => "lasso",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    File {
        path: PathBuf,
        format: MatrixFormat,
        #[serde(default)]
        text: TextOptions,
    },
    Blobs(BlobSpec),
    Subspaces(SubspaceSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub name: String,
    pub source: Option<DataSource>,
    pub pca_dim: Option<usize>,
    pub batch_size: usize,
    pub drop_last: bool,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: "dataset".into(),
            source: None,
            pca_dim: None,
            batch_size: 500,
            drop_last: false,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    /// Eigenvectors per batch and latent width; defaults to the cluster count.
    pub k: Option<usize>,
    pub sigma: SigmaPolicy,
    pub zero_tol: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            k: None,
            sigma: SigmaPolicy::Median,
            zero_tol: DEFAULT_ZERO_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfExprConfig {
    pub mode: SelfExprMode,
    pub gamma: f64,
    pub beta: f64,
    pub squared_l2: bool,
    pub neighbors_k: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub lasso_lambda: f64,
    pub lasso_max_iter: usize,
    pub lasso_tol: f64,
    /// Sparsify the lasso coefficients like the attention scores instead of
    /// using them directly.
    pub sparsify_lasso: bool,
}

impl Default for SelfExprConfig {
    fn default() -> Self {
        let e = ElasticConfig::default();
        Self {
            mode: SelfExprMode::Attention,
            gamma: e.gamma,
            beta: e.beta,
            squared_l2: e.squared_l2,
            neighbors_k: 3,
            hidden: vec![1024, 1024],
            embed_dim: 1024,
            activation: Activation::Relu,
            epochs: 100,
            optimizer: OptimizerConfig::adam(1e-3),
            lasso_lambda: 0.1,
            lasso_max_iter: 2000,
            lasso_tol: 1e-9,
            sparsify_lasso: false,
        }
    }
}

impl SelfExprConfig {
    pub fn elastic(&self) -> ElasticConfig {
        ElasticConfig {
            gamma: self.gamma,
            beta: self.beta,
            squared_l2: self.squared_l2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    /// Encoder hidden widths; empty means geometric spacing over `depth` layers.
    pub hidden: Vec<usize>,
    pub depth: usize,
    pub freeze_decoder: bool,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            depth: 4,
            freeze_decoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub variant: LossVariant,
    pub weights: LossWeights,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub pretrain_optimizer: OptimizerConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Lh,
            weights: LossWeights::default(),
            pretrain_epochs: 100,
            train_epochs: 1000,
            pretrain_optimizer: OptimizerConfig::adadelta(1e-3),
            optimizer: OptimizerConfig::adadelta(1e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    /// Defaults to the number of label classes.
    pub n_clusters: Option<usize>,
    pub restarts: usize,
    pub max_iter: usize,
    pub averaging: Averaging,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            n_clusters: None,
            restarts: 10,
            max_iter: 300,
            averaging: Averaging::Macro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Option<String>,
    pub seed: u64,
    pub mode: EvalMode,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub spectral: SpectralConfig,
    pub selfexpr: SelfExprConfig,
    pub autoencoder: AutoencoderConfig,
    pub training: TrainingConfig,
    pub kmeans: KMeansConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: None,
            seed: 0,
            mode: EvalMode::Full,
            output_dir: PathBuf::from("sadse-out"),
            data: DataConfig::default(),
            spectral: SpectralConfig::default(),
            selfexpr: SelfExprConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            training: TrainingConfig::default(),
            kmeans: KMeansConfig::default(),
        }
    }
}

/// Preset names accepted by the `preset` key.
pub const PRESETS: [&str; 7] = ["eyaleb", "coil100", "mnist", "orl", "cifar100", "imagenet10", "desk"];

fn preset_toml(name: &str) -> Option<&'static str> {
    Some(match name {
        "eyaleb" => "[data]\nname = \"eyaleb\"\nbatch_size = 486\npca_dim = 784\n[kmeans]\nn_clusters = 38\n",
        "coil100" => "[data]\nname = \"coil100\"\nbatch_size = 720\npca_dim = 3000\n[kmeans]\nn_clusters = 100\n",
        "mnist" => "[data]\nname = \"mnist\"\nbatch_size = 500\npca_dim = 2000\n[kmeans]\nn_clusters = 10\n",
        "orl" => "[data]\nname = \"orl\"\nbatch_size = 400\npca_dim = 400\n[kmeans]\nn_clusters = 40\n",
        "cifar100" => "[data]\nname = \"cifar100\"\nbatch_size = 1000\n[kmeans]\nn_clusters = 20\n",
        "imagenet10" => "[data]\nname = \"imagenet10\"\nbatch_size = 1000\n[kmeans]\nn_clusters = 10\n",
        "desk" => DESK_PRESET,
        _ => return None,
    })
}

/// Small blobs problem with scaled-down networks; runs in seconds.
const DESK_PRESET: &str = r#"
[data]
name = "blobs"
batch_size = 200
[data.source]
kind = "blobs"
n_ambient = 20
n_clusters = 5
points_per = 200
center_sep = 10.0
noise_sigma = 1.0

[spectral]
k = 4
sigma = { policy = "fixed", value = 2.5 }

[selfexpr]
hidden = [32]
embed_dim = 16
epochs = 20
lasso_max_iter = 300

[autoencoder]
hidden = [32, 16]

[training]
pretrain_epochs = 20
train_epochs = 200

[training.pretrain_optimizer]
rule = "adam"
learning_rate = 1e-3

[training.optimizer]
rule = "adam"
learning_rate = 1e-3
"#;

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // a new source kind replaces the preset's source wholesale
                    Some(slot) if k != "source" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl PipelineConfig {
    /// Parses a TOML document, layering it over the named preset if present.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::config(format!("config is not valid TOML: {e}")))?;
        let preset = user.get("preset").and_then(|v| v.as_str()).map(str::to_owned);
        let mut merged = toml::Value::try_from(PipelineConfig::default())
            .map_err(|e| Error::config(format!("cannot serialize defaults: {e}")))?;
        if let Some(name) = &preset {
            let p = preset_toml(name).ok_or_else(|| {
                Error::config(format!(
                    "unknown preset `{name}` (expected one of {})",
                    PRESETS.join(", ")
                ))
            })?;
            let pv: toml::Value = p
                .parse::<toml::Table>()
                .map(toml::Value::Table)
                .expect("preset TOML parses");
            merge(&mut merged, pv);
        }
        merge(&mut merged, user);
        let cfg: PipelineConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The named preset with everything else at defaults.
    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml_str(&format!("preset = \"{name}\"\n"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source.is_none() {
            return Err(Error::config("data.source is required"));
        }
        if d.batch_size < 2 {
            return Err(Error::config("data.batch_size must be at least 2"));
        }
        if d.pca_dim == Some(0) {
            return Err(Error::config("data.pca_dim must be positive"));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction must lie in (0, 1)"));
        }
        if self.spectral.k == Some(0) {
            return Err(Error::config("spectral.k must be positive"));
        }
        if let SigmaPolicy::Fixed(s) = self.spectral.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("spectral.sigma must be positive"));
            }
        }
        if !(self.spectral.zero_tol > 0.0 && self.spectral.zero_tol < 1.0) {
            return Err(Error::config("spectral.zero_tol must lie in (0, 1)"));
        }
        let s = &self.selfexpr;
        s.elastic().validate()?;
        s.optimizer.validate()?;
        if s.neighbors_k == 0 || s.neighbors_k >= d.batch_size {
            return Err(Error::config("selfexpr.neighbors_k must lie in [1, batch_size)"));
        }
        if s.embed_dim == 0 || s.hidden.contains(&0) {
            return Err(Error::config("selfexpr network widths must be positive"));
        }
        if !(s.lasso_lambda > 0.0 && s.lasso_lambda.is_finite()) || s.lasso_max_iter == 0 {
            return Err(Error::config(
                "selfexpr.lasso_lambda must be positive and lasso_max_iter nonzero",
            ));
        }
        if self.autoencoder.hidden.contains(&0) || (self.autoencoder.hidden.is_empty() && self.autoencoder.depth == 0) {
            return Err(Error::config("autoencoder widths and depth must be positive"));
        }
        let t = &self.training;
        t.weights.validate()?;
        t.optimizer.validate()?;
        t.pretrain_optimizer.validate()?;
        if self.kmeans.restarts == 0 || self.kmeans.max_iter == 0 || self.kmeans.n_clusters == Some(0) {
            return Err(Error::config(
                "kmeans restarts, max_iter and n_clusters must be positive",
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stage cache

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

const CACHE_MAGIC: &[u8; 4] = b"SADS";

/// Content-keyed artifacts under `<dir>/cache`, shared by every run that
/// writes to the same output directory.
struct StageCache {
    dir: PathBuf,
}

impl StageCache {
    fn path(&self, stage: &str, key: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{:016x}.bin", fnv1a(key.as_bytes())))
    }

    fn get(&self, stage: &str, key: &str) -> Option<Vec<u8>> {
        let buf = fs::read(self.path(stage, key)).ok()?;
        let rest = buf.strip_prefix(CACHE_MAGIC)?;
        let len = u64::from_le_bytes(rest.get(..8)?.try_into().ok()?) as usize;
        let stored = rest.get(8..8 + len)?;
        (stored == key.as_bytes()).then(|| rest[8 + len..].to_vec())
    }

    fn put(&self, stage: &str, key: &str, payload: &[u8]) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        let path = self.path(stage, key);
        let mut buf = Vec::with_capacity(12 + key.len() + payload.len());
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&(key.len() as u64).to_le_bytes());
        buf.extend_from_slice(key.as_bytes());
        buf.extend_from_slice(payload);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, buf)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

fn encode_matrices(ms: &[DMatrix<f64>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(ms.len() as u64).to_le_bytes());
    for m in ms {
        out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
    out
}

fn decode_matrices(buf: &[u8]) -> Option<Vec<DMatrix<f64>>> {
    let mut pos = 0;
    let word = |pos: &mut usize| -> Option<[u8; 8]> {
        let w = buf.get(*pos..*pos + 8)?.try_into().ok()?;
        *pos += 8;
        Some(w)
    };
    let count = u64::from_le_bytes(word(&mut pos)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let r = u64::from_le_bytes(word(&mut pos)?) as usize;
        let c = u64::from_le_bytes(word(&mut pos)?) as usize;
        if r.checked_mul(c)?.checked_mul(8)? > buf.len() {
            return None;
        }
        let mut m = DMatrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                m[(i, j)] = f64::from_le_bytes(word(&mut pos)?);
            }
        }
        out.push(m);
    }
    (pos == buf.len()).then_some(out)
}

fn history_matrix(h: &[EpochLoss]) -> DMatrix<f64> {
    DMatrix::from_fn(h.len(), 7, |r, c| {
        let b = &h[r].breakdown;
        [
            h[r].epoch as f64,
            b.reconstruction,
            b.spectral_l1,
            b.spectral_l2,
            b.orthogonality,
            b.structure,
            b.total,
        ][c]
    })
}

fn history_from_matrix(m: &DMatrix<f64>) -> Vec<EpochLoss> {
    (0..m.nrows())
        .map(|r| EpochLoss {
            epoch: m[(r, 0)] as usize,
            breakdown: LossBreakdown {
                reconstruction: m[(r, 1)],
                spectral_l1: m[(r, 2)],
                spectral_l2: m[(r, 3)],
                orthogonality: m[(r, 4)],
                structure: m[(r, 5)],
                total: m[(r, 6)],
            },
        })
        .collect()
}

/// Model checkpoint followed by its loss history.
fn encode_model(ae: &Autoencoder, history: &[EpochLoss]) -> Vec<u8> {
    let ck = checkpoint::encode(ae);
    let mut out = (ck.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&ck);
    out.extend_from_slice(&encode_matrices(&[history_matrix(history)]));
    out
}

fn decode_model(buf: &[u8]) -> Option<(Autoencoder, Vec<EpochLoss>)> {
    let len = u64::from_le_bytes(buf.get(..8)?.try_into().ok()?) as usize;
    let ae = checkpoint::decode(buf.get(8..8usize.checked_add(len)?)?).ok()?;
    let hist = decode_matrices(&buf[8 + len..])?;
    Some((ae, history_from_matrix(hist.first()?)))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    pub cached: bool,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    /// Estimate of the largest set of simultaneously live buffers, in bytes.
    pub peak_memory_bytes: usize,
    pub artifacts: Vec<PathBuf>,
    pub attention_history: Vec<f64>,
    pub pretrain_history: Vec<EpochLoss>,
    pub train_history: Vec<EpochLoss>,
    pub report: Option<ClusterReport>,
    /// `k × N` embedding of the evaluated points.
    pub embedding: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
    pub failed_stage: Option<String>,
}

impl RunManifest {
    fn new(config: PipelineConfig) -> Self {
        Self {
            config,
            stages: Vec::new(),
            peak_memory_bytes: 0,
            artifacts: Vec::new(),
            attention_history: Vec::new(),
            pretrain_history: Vec::new(),
            train_history: Vec::new(),
            report: None,
            embedding: DMatrix::zeros(0, 0),
            labels: None,
            failed_stage: None,
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    fn track_memory(&mut self, bytes: usize) {
        self.peak_memory_bytes = self.peak_memory_bytes.max(bytes);
    }

    /// Timings and artifact listing; varies between runs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let status = match &self.failed_stage {
            Some(stage) => format!("failed at {stage}"),
            None => "ok".into(),
        };
        let _ = writeln!(s, "status = {status}");
        let _ = writeln!(s, "peak_memory_estimate_bytes = {}", self.peak_memory_bytes);
        for st in &self.stages {
            let _ = writeln!(
                s,
                "stage.{} = {:.6}s{}{}",
                st.name,
                st.seconds,
                if st.cached { " (cached)" } else { "" },
                if st.note.is_empty() {
                    String::new()
                } else {
                    format!(" {}", st.note)
                }
            );
        }
        for a in &self.artifacts {
            let _ = writeln!(s, "artifact = {}", a.display());
        }
        s
    }
}

struct Timer<'a> {
    manifest: &'a mut RunManifest,
}

impl Timer<'_> {
    fn run<T>(&mut self, name: &str, f: impl FnOnce(&mut RunManifest) -> Result<(T, bool, String)>) -> Result<T> {
        let start = Instant::now();
        log::info!("stage {name}");
        match f(self.manifest) {
            Ok((v, cached, note)) => {
                self.manifest.stages.push(StageRecord {
                    name: name.into(),
                    seconds: start.elapsed().as_secs_f64(),
                    cached,
                    note,
                });
                Ok(v)
            }
            Err(e) => {
                self.manifest.failed_stage = Some(name.into());
                Err(e.in_stage(name))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Stages

/// Loads or generates the configured dataset.
pub fn ingest(cfg: &PipelineConfig) -> Result<Dataset> {
    let mut ds = match cfg
        .data
        .source
        .as_ref()
        .ok_or_else(|| Error::config("data.source is required"))?
    {
        DataSource::File { path, format, text } => load_matrix(path, *format, *text)?,
        DataSource::Blobs(spec) => synth_blobs(spec, cfg.seed)?,
        DataSource::Subspaces(spec) => synth_union_of_subspaces(spec, cfg.seed)?.0,
    };
    ds.name.clone_from(&cfg.data.name);
    Ok(ds)
}

/// Training and evaluation sets for the configured mode, after PCA fitted on
/// the training part.
pub struct PreparedData {
    pub train: Dataset,
    pub eval: Dataset,
    pub pca: Option<Pca>,
}

fn apply_pca(pca: &Pca, ds: &Dataset) -> Result<Dataset> {
    Dataset::new(
        pca.transform(&ds.features)?,
        ds.labels.clone(),
        ds.name.clone(),
        ds.provenance.clone(),
    )
}

fn prepare(cfg: &PipelineConfig, timer: &mut Timer) -> Result<PreparedData> {
    let ds = timer.run("ingest", |m| {
        let ds = ingest(cfg)?;
        m.track_memory(ds.features.len() * 8);
        let note = format!("{} features x {} samples", ds.n_features(), ds.n_samples());
        Ok((ds, false, note))
    })?;
    let (train, eval) = timer.run("split", |_| match cfg.mode {
        EvalMode::Full => Ok(((ds.clone(), ds.clone()), false, "full data".into())),
        EvalMode::Test => {
            let (tr, te) = train_test_split(&ds, cfg.data.test_fraction, cfg.seed)?;
            let note = format!("{} train / {} test", tr.n_samples(), te.n_samples());
            Ok(((tr, te), false, note))
        }
    })?;
    let Some(dim) = cfg.data.pca_dim else {
        return Ok(PreparedData { train, eval, pca: None });
    };
    timer.run("pca", |_| {
        let pca = Pca::fit(&train.features, dim)?;
        let retained: f64 = pca.explained_variance_ratio.iter().sum();
        let (tr, ev) = (apply_pca(&pca, &train)?, apply_pca(&pca, &eval)?);
        let note = format!("{dim} components, {:.4} variance retained", retained);
        Ok((
            PreparedData {
                train: tr,
                eval: ev,
                pca: Some(pca),
            },
            false,
            note,
        ))
    })
}

fn resolved_clusters(cfg: &PipelineConfig, ds: &Dataset) -> Result<usize> {
    cfg.kmeans
        .n_clusters
        .or_else(|| ds.n_classes())
        .ok_or_else(|| Error::config("kmeans.n_clusters is required for unlabelled data"))
}

fn resolved_k(cfg: &PipelineConfig, ds: &Dataset) -> Result<usize> {
    match cfg.spectral.k {
        Some(k) => Ok(k),
        None => resolved_clusters(cfg, ds),
    }
}

fn encoder_sizes(cfg: &PipelineConfig, input: usize, k: usize) -> Vec<usize> {
    if cfg.autoencoder.hidden.is_empty() {
        geometric_sizes(input, k, cfg.autoencoder.depth)
    } else {
        let mut s = vec![input];
        s.extend(&cfg.autoencoder.hidden);
        s.push(k);
        s
    }
}

fn data_key(cfg: &PipelineConfig, train: &Dataset) -> String {
    let bytes = data::encode_binary(&train.features, None);
    format!(
        "data={:016x}:{}x{};batch={},{},{}",
        fnv1a(&bytes),
        train.n_features(),
        train.n_samples(),
        cfg.data.batch_size,
        cfg.data.drop_last,
        cfg.seed
    )
}

fn targets_key(base: &str, cfg: &PipelineConfig, k: usize) -> String {
    format!(
        "{base};k={k};sigma={:?};tol={:?}",
        cfg.spectral.sigma, cfg.spectral.zero_tol
    )
}

fn selfexpr_key(base: &str, cfg: &PipelineConfig) -> String {
    let s = &cfg.selfexpr;
    match s.mode {
        SelfExprMode::Attention => format!(
            "{base};attention;{:?};{};{:?};{};{:?};{:?};{}",
            s.elastic(),
            s.neighbors_k,
            s.hidden,
            s.embed_dim,
            s.activation,
            s.optimizer,
            s.epochs
        ),
        SelfExprMode::Lasso => format!(
            "{base};lasso;{:?};{};{:?};{};{}",
            s.lasso_lambda, s.lasso_max_iter, s.lasso_tol, s.sparsify_lasso, s.neighbors_k
        ),
    }
}

fn pretrain_key(base: &str, cfg: &PipelineConfig, sizes: &[usize]) -> String {
    let t = &cfg.training;
    format!(
        "{base};ae={sizes:?};pre={};{:?}",
        t.pretrain_epochs, t.pretrain_optimizer
    )
}

fn compute_targets(batches: &[DataBatch], cfg: &PipelineConfig, k: usize) -> Result<Vec<SpectralTarget>> {
    batches
        .iter()
        .map(|b| {
            batch_targets(b, cfg.spectral.sigma, k, cfg.spectral.zero_tol)
                .map_err(|e| Error::Numerical(format!("batch {}: {e}", b.batch_id)))
        })
        .collect()
}

fn encode_targets(ts: &[SpectralTarget]) -> Vec<u8> {
    let mut ms = Vec::with_capacity(ts.len() * 2);
    for t in ts {
        ms.push(t.vectors.clone());
        let mut meta: Vec<f64> = t.eigenvalues.clone();
        meta.push(t.zero_modes_skipped as f64);
        ms.push(DMatrix::from_row_slice(1, meta.len(), &meta));
    }
    encode_matrices(&ms)
}

fn decode_targets(buf: &[u8]) -> Option<Vec<SpectralTarget>> {
    let ms = decode_matrices(buf)?;
    ms.chunks(2)
        .map(|pair| {
            let [vectors, meta] = pair else { return None };
            let meta = meta.as_slice();
            let (zero, vals) = meta.split_last()?;
            Some(SpectralTarget {
                vectors: vectors.clone(),
                eigenvalues: vals.to_vec(),
                zero_modes_skipped: *zero as usize,
            })
        })
        .collect()
}

/// Per-batch structure matrices and the attention objective history.
fn compute_structures(batches: &[DataBatch], cfg: &PipelineConfig) -> Result<(Vec<DMatrix<f64>>, Vec<f64>)> {
    let s = &cfg.selfexpr;
    match s.mode {
        SelfExprMode::Attention => {
            let nets = AttentionNets::new(
                batches[0].dim(),
                &s.hidden,
                s.embed_dim,
                s.activation,
                cfg.seed ^ 0x5e1f,
            )?;
            let opts = AttentionTraining {
                epochs: s.epochs,
                seed: cfg.seed,
                optimizer: s.optimizer,
            };
            let (nets, history) = train_attention(&nets, batches, &s.elastic(), &opts)?;
            let mats = batches
                .iter()
                .map(|b| Ok(self_expression(&nets, b, s.neighbors_k)?.sparse_binary))
                .collect::<Result<Vec<_>>>()?;
            Ok((mats, history))
        }
        SelfExprMode::Lasso => {
            let mats = batches
                .iter()
                .map(|b| {
                    let h = lasso_selfexpr(b, s.lasso_lambda, s.lasso_max_iter, s.lasso_tol)?.coefficients;
                    if s.sparsify_lasso {
                        knn_sparsify(&h, s.neighbors_k)
                    } else {
                        Ok(h)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((mats, Vec::new()))
        }
    }
}

fn write_history(path: &Path, h: &[EpochLoss]) -> Result<()> {
    let mut s = String::from("# epoch total\n");
    for e in h {
        let _ = writeln!(s, "{} {:.12e}", e.epoch, e.breakdown.total);
    }
    fs::write(path, s)?;
    Ok(())
}

/// Full training and evaluation run. Artifacts land in `config.output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    let mut manifest = RunManifest::new(cfg.clone());
    let result = run_inner(cfg, &mut manifest);
    if let Err(e) = &result {
        log::error!("{e}");
        let _ = fs::create_dir_all(&cfg.output_dir);
        let _ = fs::write(cfg.output_dir.join("manifest.txt"), manifest.to_text());
    }
    result.map(|_| manifest)
}

fn run_inner(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<()> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::from(e).in_stage("output"))?;
    let cache = StageCache { dir: out.join("cache") };
    let mut timer = Timer { manifest };

    let prepared = prepare(cfg, &mut timer)?;
    let train = &prepared.train;
    let k = resolved_k(cfg, train).map_err(|e| e.in_stage("config"))?;
    let n_clusters = resolved_clusters(cfg, &prepared.eval).map_err(|e| e.in_stage("config"))?;

    let batches = timer.run("batch", |m| {
        let plan = BatchPlan::new(train.n_samples(), cfg.data.batch_size, cfg.data.drop_last, cfg.seed)?;
        let b = make_batches(train, &plan)?;
        m.track_memory(train.features.len() * 16);
        let note = format!("{} batches", b.len());
        Ok((b, false, note))
    })?;
    let base = data_key(cfg, train);
    let m_total: usize = batches.iter().map(DataBatch::len).sum();
    let m_sq: usize = batches.iter().map(|b| b.len() * b.len()).sum();

    let tkey = targets_key(&base, cfg, k);
    let targets = timer.run("targets", |m| {
        let max_m = batches.iter().map(DataBatch::len).max().unwrap_or(0);
        m.track_memory(train.features.len() * 16 + max_m * max_m * 8 * 4 + m_total * k * 8);
        if let Some(t) = cache.get("targets", &tkey).and_then(|b| decode_targets(&b)) {
            return Ok((t, true, String::new()));
        }
        let t = compute_targets(&batches, cfg, k)?;
        cache.put("targets", &tkey, &encode_targets(&t))?;
        Ok((t, false, String::new()))
    })?;

    let needs_structure = cfg.training.variant == LossVariant::Lh;
    let skey = selfexpr_key(&base, cfg);
    let structures = timer.run("selfexpr", |m| {
        if !needs_structure {
            return Ok((None, false, "not used by this variant".into()));
        }
        m.track_memory(train.features.len() * 16 + m_total * k * 8 + m_sq * 8 * 3);
        let (mats, history, cached) = match cache.get("selfexpr", &skey).and_then(|b| decode_matrices(&b)) {
            Some(mut ms) => {
                let h = ms.pop().map(|h| h.as_slice().to_vec()).unwrap_or_default();
                (ms, h, true)
            }
            None => {
                let (mats, history) = compute_structures(&batches, cfg)?;
                let mut all = mats.clone();
                all.push(DMatrix::from_row_slice(1, history.len(), &history));
                cache.put("selfexpr", &skey, &encode_matrices(&all))?;
                (mats, history, false)
            }
        };
        m.attention_history = history;
        let s = mats
            .iter()
            .map(StructureMatrix::from_dense)
            .collect::<Result<Vec<_>>>()?;
        Ok((Some(s), cached, cfg.selfexpr.mode.name().to_string()))
    })?;

    let sizes = encoder_sizes(cfg, train.n_features(), k);
    let pkey = pretrain_key(&base, cfg, &sizes);
    let pretrained = timer.run("pretrain", |m| {
        if let Some((ae, h)) = cache.get("pretrain", &pkey).and_then(|b| decode_model(&b)) {
            m.pretrain_history = h;
            return Ok((ae, true, String::new()));
        }
        let mut ae = Autoencoder::new(&sizes, cfg.seed)?;
        let opts = TrainOptions::new(cfg.training.pretrain_epochs, cfg.seed, cfg.training.pretrain_optimizer);
        let h = pretrain_autoencoder(&mut ae, &batches, &opts)?;
        cache.put("pretrain", &pkey, &encode_model(&ae, &h))?;
        m.pretrain_history = h;
        Ok((ae, false, String::new()))
    })?;

    let t = &cfg.training;
    let train_key = format!(
        "{pkey};{tkey};{};{:?};{:?};{};{:?};{}",
        if needs_structure { skey.as_str() } else { "-" },
        t.variant,
        t.weights,
        t.train_epochs,
        t.optimizer,
        cfg.autoencoder.freeze_decoder
    );
    let model = timer.run("train", |m| {
        if let Some((ae, h)) = cache.get("train", &train_key).and_then(|b| decode_model(&b)) {
            m.train_history = h;
            return Ok((ae, true, String::new()));
        }
        let mut ae = pretrained.clone();
        let mut opts = TrainOptions::new(t.train_epochs, cfg.seed.wrapping_add(1), t.optimizer);
        opts.freeze_decoder = cfg.autoencoder.freeze_decoder;
        let h = train_sadse(
            &mut ae,
            &batches,
            &targets,
            structures.as_deref(),
            t.weights,
            t.variant,
            &opts,
        )?;
        cache.put("train", &train_key, &encode_model(&ae, &h))?;
        m.train_history = h;
        Ok((ae, false, t.variant.name().to_string()))
    })?;

    let eval = &prepared.eval;
    let embedding = timer.run("embed", |m| {
        m.track_memory(eval.features.len() * 8 * 3);
        Ok((
            model.embed(&eval.features)?,
            false,
            format!("{} points", eval.n_samples()),
        ))
    })?;
    let report = timer.run("cluster", |_| {
        let res = kmeans(
            &embedding,
            n_clusters,
            cfg.kmeans.restarts,
            cfg.kmeans.max_iter,
            cfg.seed,
        )?;
        let report = match &eval.labels {
            Some(truth) => Some(ClusterReport::evaluate(
                res.labels.clone(),
                truth,
                n_clusters,
                cfg.seed,
                cfg.kmeans.restarts,
                cfg.kmeans.averaging,
            )?),
            None => None,
        };
        Ok(((report, res.labels), false, String::new()))
    })?;

    let manifest = timer.manifest;
    let (report, predicted) = report;
    manifest.report = report;
    manifest.embedding = embedding;
    manifest.labels = eval.labels.clone();
    write_outputs(cfg, manifest, &model, &predicted).map_err(|e| e.in_stage("write"))?;
    Ok(())
}

fn write_outputs(cfg: &PipelineConfig, m: &mut RunManifest, model: &Autoencoder, predicted: &[usize]) -> Result<()> {
    let out = &cfg.output_dir;
    let mut files = Vec::new();
    let ck = out.join("model.ckpt");
    checkpoint::save(&ck, model)?;
    files.push(ck);
    let emb = out.join("embedding.sadm");
    data::save_matrix_binary(&emb, &m.embedding, m.labels.as_deref())?;
    files.push(emb);
    let pred = out.join("predicted.txt");
    let text: String = predicted.iter().map(|p| format!("{p}\n")).collect();
    fs::write(&pred, text)?;
    files.push(pred);
    let pre = out.join("loss_pretrain.txt");
    write_history(&pre, &m.pretrain_history)?;
    files.push(pre);
    let tr = out.join("loss_train.txt");
    write_history(&tr, &m.train_history)?;
    files.push(tr);
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml())?;
    files.push(cfg_path);
    let metrics = out.join("metrics.txt");
    files.push(metrics.clone());
    let manifest_path = out.join("manifest.txt");
    files.push(manifest_path.clone());
    m.artifacts = files;
    fs::write(&metrics, metrics_text(m))?;
    fs::write(&manifest_path, m.to_text())?;
    Ok(())
}

fn final_total(h: &[EpochLoss]) -> String {
    h.last()
        .map_or_else(|| "none".into(), |e| format!("{:.12e}", e.breakdown.total))
}

/// Deterministic record of a run: report, final losses, artifacts, config.
pub fn metrics_text(m: &RunManifest) -> String {
    let cfg = &m.config;
    let mut s = String::new();
    let _ = writeln!(s, "[run]");
    let _ = writeln!(s, "dataset = {}", cfg.data.name);
    let _ = writeln!(s, "mode = {}", cfg.mode.name());
    let _ = writeln!(s, "variant = {}", cfg.training.variant.name());
    let _ = writeln!(s, "selfexpr = {}", cfg.selfexpr.mode.name());
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "embedding_dim = {}", m.embedding.nrows());
    let _ = writeln!(s, "evaluated_points = {}", m.embedding.ncols());
    let _ = writeln!(s, "\n[report]");
    match &m.report {
        Some(r) => s.push_str(&r.to_key_values("")),
        None => s.push_str("status = no labels\n"),
    }
    let _ = writeln!(s, "\n[losses]");
    let _ = writeln!(s, "pretrain_final = {}", final_total(&m.pretrain_history));
    let _ = writeln!(s, "train_final = {}", final_total(&m.train_history));
    let attention = m
        .attention_history
        .last()
        .map_or_else(|| "none".into(), |v| format!("{v:.12e}"));
    let _ = writeln!(s, "attention_final = {attention}");
    let _ = writeln!(s, "\n[artifacts]");
    for a in &m.artifacts {
        if let Some(name) = a.file_name() {
            let _ = writeln!(s, "file = {}", name.to_string_lossy());
        }
    }
    let _ = writeln!(s, "\n[config]");
    s.push_str(&cfg.to_toml());
    s
}

// ---------------------------------------------------------------------------
// Standalone steps

/// Embeds the evaluation set of `cfg` with a saved model; no training.
pub fn embed_with_checkpoint(cfg: &PipelineConfig, checkpoint_path: &Path) -> Result<RunManifest> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let mut manifest = RunManifest::new(cfg.clone());
    let mut timer = Timer {
        manifest: &mut manifest,
    };
    let prepared = prepare(cfg, &mut timer)?;
    let model = timer.run("load_checkpoint", |_| {
        Ok((checkpoint::load(checkpoint_path)?, false, String::new()))
    })?;
    let eval = &prepared.eval;
    let embedding = timer.run("embed", |_| Ok((model.embed(&eval.features)?, false, String::new())))?;
    manifest.embedding = embedding;
    manifest.labels = eval.labels.clone();
    Ok(manifest)
}

/// Clusters a stored embedding and scores it against its labels.
pub fn evaluate_embedding(
    embedding: &DMatrix<f64>,
    labels: &[usize],
    n_clusters: usize,
    kcfg: &KMeansConfig,
    seed: u64,
) -> Result<ClusterReport> {
    let res = kmeans(embedding, n_clusters, kcfg.restarts, kcfg.max_iter, seed)?;
    ClusterReport::evaluate(res.labels, labels, n_clusters, seed, kcfg.restarts, kcfg.averaging)
}

/// Plain spectral clustering of the whole dataset as one batch.
pub fn batch_spectral_clustering(
    ds: &Dataset,
    k: usize,
    sigma: SigmaPolicy,
    n_clusters: usize,
    kcfg: &KMeansConfig,
    seed: u64,
) -> Result<(Vec<usize>, SpectralTarget)> {
    let batch = DataBatch::new(ds.features.clone(), ds.labels.clone(), 0)?;
    let t = batch_targets(&batch, sigma, k, DEFAULT_ZERO_TOL)?;
    let res = kmeans(&t.vectors, n_clusters, kcfg.restarts, kcfg.max_iter, seed)?;
    Ok((res.labels, t))
}

/// Writes `x,y,label` lines of the top-2 principal projection.
pub fn export_embedding_2d(embedding: &DMatrix<f64>, labels: Option<&[usize]>, path: &Path) -> Result<DMatrix<f64>> {
    if embedding.nrows() < 2 {
        return Err(Error::param(format!(
            "need at least 2 embedding dimensions, got {}",
            embedding.nrows()
        )));
    }
    if let Some(l) = labels {
        if l.len() != embedding.ncols() {
            return Err(Error::input("label count does not match embedding columns"));
        }
    }
    let pca = Pca::fit(embedding, 2)?;
    let xy = pca.transform(embedding)?;
    let mut s = String::new();
    for j in 0..xy.ncols() {
        let label = labels.map_or_else(String::new, |l| l[j].to_string());
        let _ = writeln!(s, "{:?},{:?},{label}", xy[(0, j)], xy[(1, j)]);
    }
    fs::write(path, s)?;
    Ok(xy)
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub variant: LossVariant,
    pub mode: SelfExprMode,
    pub outcome: std::result::Result<ClusterReport, String>,
    pub pretrain_cached: bool,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub dataset: String,
    pub seed: u64,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    /// One row per (variant, self-expression) cell with accuracy and NMI.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# ablation dataset={} seed={}", self.dataset, self.seed);
        let _ = writeln!(s, "{:<8} {:<10} {:>9} {:>9}", "variant", "selfexpr", "accuracy", "nmi");
        for c in &self.cells {
            match &c.outcome {
                Ok(r) => {
                    let _ = writeln!(
                        s,
                        "{:<8} {:<10} {:>9.4} {:>9.4}",
                        c.variant.name(),
                        c.mode.name(),
                        r.accuracy,
                        r.nmi
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{:<8} {:<10} failed: {e}", c.variant.name(), c.mode.name());
                }
            }
        }
        s
    }
}

/// Runs every (variant, mode) cell in its own subdirectory of the output
/// directory. Cells share the stage cache, so ingest-derived targets and the
/// pretrained model are computed once.
pub fn run_ablation(cfg: &PipelineConfig, variants: &[LossVariant], modes: &[SelfExprMode]) -> Result<AblationTable> {
    if variants.is_empty() || modes.is_empty() {
        return Err(Error::param("ablation grid is empty"));
    }
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let mut cells = Vec::with_capacity(variants.len() * modes.len());
    for &variant in variants {
        for &mode in modes {
            let mut c = cfg.clone();
            c.training.variant = variant;
            c.selfexpr.mode = mode;
            let cell_dir = cfg
                .output_dir
                .join("cells")
                .join(format!("{}_{}", variant.name(), mode.name()));
            c.output_dir = cell_dir;
            let shared = cfg.output_dir.join("cache");
            let outcome = run_cell(&c, &shared);
            let (outcome, pretrain_cached) = match outcome {
                Ok(m) => {
                    let cached = m.stage("pretrain").is_some_and(|s| s.cached);
                    match m.report {
                        Some(r) => (Ok(r), cached),
                        None => (Err("dataset has no labels".to_string()), cached),
                    }
                }
                Err(e) => (Err(e.to_string()), false),
            };
            cells.push(AblationCell {
                variant,
                mode,
                outcome,
                pretrain_cached,
            });
        }
    }
    let table = AblationTable {
        dataset: cfg.data.name.clone(),
        seed: cfg.seed,
        cells,
    };
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("ablation.txt"), table.to_text())?;
    Ok(table)
}

fn run_cell(cfg: &PipelineConfig, shared_cache: &Path) -> Result<RunManifest> {
    // The cell directory links its cache to the shared one.
    fs::create_dir_all(&cfg.output_dir)?;
    fs::create_dir_all(shared_cache)?;
    let link = cfg.output_dir.join("cache");
    if !link.exists() {
        link_dir(shared_cache, &link)?;
    }
    run_pipeline(cfg)
}

#[cfg(unix)]
fn link_dir(target: &Path, link: &Path) -> Result<()> {
    let target = fs::canonicalize(target)?;
    std::os::unix::fs::symlink(target, link)?;
    Ok(())
}

#[cfg(not(unix))]
fn link_dir(_target: &Path, link: &Path) -> Result<()> {
    fs::create_dir_all(link)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_with_paper_defaults() {
        let c = PipelineConfig::preset("eyaleb").unwrap();
        assert_eq!(c.data.batch_size, 486);
        assert_eq!(c.data.pca_dim, Some(784));
        assert_eq!(c.kmeans.n_clusters, Some(38));
        assert_eq!(c.training.weights, LossWeights::default());
        assert_eq!((c.training.pretrain_epochs, c.training.train_epochs), (100, 1000));
        assert_eq!(c.selfexpr.neighbors_k, 3);
        assert_eq!((c.selfexpr.gamma, c.selfexpr.beta), (200.0, 0.9));
        assert_eq!(PipelineConfig::preset("cifar100").unwrap().data.pca_dim, None);
        assert!(PipelineConfig::preset("nope").is_err());
    }

    #[test]
    fn user_keys_override_preset() {
        let c = PipelineConfig::from_toml_str(
            "preset = \"mnist\"\nseed = 9\n[data]\nbatch_size = 50\n[data.source]\nkind = \"blobs\"\nn_ambient = 3\nn_clusters = 2\npoints_per = 5\ncenter_sep = 4.0\nnoise_sigma = 0.1\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.data.batch_size, 50);
        assert_eq!(c.data.pca_dim, Some(2000));
        assert!(matches!(c.data.source, Some(DataSource::Blobs(_))));
        assert!(PipelineConfig::from_toml_str("[data]\nbogus = 1\n").is_err());
        assert!(PipelineConfig::from_toml_str("not toml [").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = PipelineConfig::preset("desk").unwrap();
        let back = PipelineConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
        let mut bad = c.clone();
        bad.data.source = None;
        assert!(matches!(bad.validate(), Err(Error::InvalidConfiguration(_))));
    }

    #[test]
    fn matrix_list_round_trip_and_corruption() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, f64::MIN_POSITIVE]);
        let b = DMatrix::from_row_slice(1, 1, &[-0.5]);
        let buf = encode_matrices(&[a.clone(), b.clone()]);
        assert_eq!(decode_matrices(&buf).unwrap(), vec![a, b]);
        assert!(decode_matrices(&buf[..buf.len() - 1]).is_none());
    }

    #[test]
    fn cache_rejects_mismatched_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cache = StageCache {
            dir: dir.path().to_path_buf(),
        };
        cache.put("x", "key-a", b"payload").unwrap();
        assert_eq!(cache.get("x", "key-a").unwrap(), b"payload");
        assert!(cache.get("x", "key-b").is_none());
    }

    #[test]
    fn export_at_two_dims_is_centered_input() {
        let dir = tempfile::tempdir().unwrap();
        let e = DMatrix::from_row_slice(2, 4, &[0.0, 4.0, 0.0, 4.0, 0.0, 0.0, 1.0, 1.0]);
        let path = dir.path().join("xy.csv");
        let xy = export_embedding_2d(&e, Some(&[0, 1, 0, 1]), &path).unwrap();
        let centered = DMatrix::from_row_slice(2, 4, &[-2.0, 2.0, -2.0, 2.0, -0.5, -0.5, 0.5, 0.5]);
        for r in 0..2 {
            let same = (xy.row(r) - centered.row(r)).amax() < 1e-12;
            let flipped = (xy.row(r) + centered.row(r)).amax() < 1e-12;
            assert!(same || flipped);
        }
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        for (j, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            assert!((f[0].parse::<f64>().unwrap() - xy[(0, j)]).abs() < 1e-9);
            assert!((f[1].parse::<f64>().unwrap() - xy[(1, j)]).abs() < 1e-9);
        }
        assert!(matches!(
            export_embedding_2d(&DMatrix::zeros(1, 3), None, &path),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn empty_ablation_grid_is_rejected() {
        let c = PipelineConfig::preset("desk").unwrap();
        assert!(matches!(
            run_ablation(&c, &[], &[SelfExprMode::Attention]),
            Err(Error::InvalidParameter(_))
        ));
    }
}
