//! Run configuration, run-directory layout and the pipeline stages.
//!
//! ```text
//! <run>/config.lock.json     resolved config and its hash
//! <run>/manifest.json        append-only stage log
//! <run>/run.lock             held while a process owns the directory
//! <run>/data/                dataset (when synthesized)
//! <run>/canonical_poses/     canonical.json, pose_<k>.png
//! <run>/checkpoints/         gan.ckpt, gan_latest.ckpt, backbone_{a,b}.ckpt
//! <run>/synth/               <sample>_p<k>.png pose-normalized images
//! <run>/metrics/             eval.json, cmc.csv, ablations.json, reid.json
//! <run>/losses/gan.csv
//! <run>/images/grids/        source | target pose | generated triptychs
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonical::{
    principal_axes_2d, select_canonical_poses, CanonicalPoseSet, EmbedderConfig, PoseClusterModel, DEFAULT_K,
};
use crate::checkpoint::{Checkpoint, RngState};
use crate::dataset::{read_json, write_file, write_json, Dataset, Sample};
use crate::error::{Error, Result};
use crate::gan::{
    mean_reconstruction_l1, synthesize_normalized, GanState, GanTrainConfig, GanTrainer, PairData, PairSampler,
    StepMetrics,
};
use crate::networks::{init_params, ArchConfig, Generator};
use crate::pose::{rasterize_pose, KeypointSet, LimbSchema};
use crate::raster::{hstack, vstack, Image, PersonImage};
use crate::reid::{train_identity_classifier, Backbone, BackboneArch, ReidTrainConfig, ReidTrainReport};
use crate::retrieval::{
    evaluate_features, image_features, sample_meta, EvalProtocol, EvalReport, FusionMode, ImageFeatures, ReidModels,
};
use crate::synth::{generate_dataset, SynthConfig};

const DEFAULT_DIMS: [usize; 2] = [64, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing dataset directory; when unset the dataset is synthesized.
    pub path: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseConfig {
    pub limb_thickness: u32,
    pub joint_radius: u32,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            limb_thickness: 2,
            joint_radius: 1,
        }
    }
}

impl PoseConfig {
    pub fn schema(&self) -> LimbSchema {
        LimbSchema::coco(self.limb_thickness, self.joint_radius)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CanonicalConfig {
    pub k: usize,
    pub max_iter: usize,
    pub embedder: EmbedderConfig,
}

impl Default for CanonicalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            max_iter: 100,
            embedder: EmbedderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: EvalProtocol,
    /// When false, evaluation uses backbone A alone.
    pub use_backbone_b: bool,
    /// Canonical poses fused with the backbone-A feature.
    pub fusion_poses: usize,
    /// Also score backbone A alone and 1-pose fusion.
    pub ablations: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: EvalProtocol::default(),
            use_backbone_b: true,
            fusion_poses: DEFAULT_K,
            ablations: true,
        }
    }
}

impl EvalConfig {
    pub fn mode(&self) -> FusionMode {
        if self.use_backbone_b {
            FusionMode::Fused {
                poses: self.fusion_poses,
            }
        } else {
            FusionMode::BackboneA
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Drives every stage; stage sections must not set their own seed.
    pub seed: u64,
    /// `[height, width]` of every image.
    pub dims: [usize; 2],
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub pose: PoseConfig,
    pub canonical: CanonicalConfig,
    pub arch: ArchConfig,
    pub gan: GanTrainConfig,
    pub backbone: BackboneArch,
    pub reid: ReidTrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: DEFAULT_DIMS,
            output_dir: None,
            data: DataConfig::default(),
            pose: PoseConfig::default(),
            canonical: CanonicalConfig::default(),
            arch: ArchConfig::default(),
            gan: GanTrainConfig::default(),
            backbone: BackboneArch::default(),
            reid: ReidTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Propagates the top-level seed and dims into the stage sections and
    /// validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        for (section, seed) in [
            ("data.synth", self.data.synth.seed),
            ("gan", self.gan.seed),
            ("reid", self.reid.seed),
        ] {
            if seed != 0 {
                return Err(Error::Config(format!(
                    "{section}.seed is derived from the top-level seed; set `seed` instead"
                )));
            }
        }
        self.data.synth.seed = self.seed;
        self.gan.seed = self.seed;
        self.reid.seed = self.seed;

        let dims = self.dims;
        for (section, slot) in [
            ("data.synth.dims", &mut self.data.synth.dims),
            ("arch.input_dims", &mut self.arch.input_dims),
            ("backbone.input_dims", &mut self.backbone.input_dims),
        ] {
            if *slot != dims && *slot != DEFAULT_DIMS {
                return Err(Error::Config(format!(
                    "{section} {slot:?} disagrees with dims {dims:?}"
                )));
            }
            *slot = dims;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        crate::pose::check_pose_dims((self.dims[0], self.dims[1]))?;
        self.pose.schema().validate()?;
        if self.data.path.is_none() {
            self.data.synth.validate()?;
        }
        if self.canonical.k == 0 || self.canonical.max_iter == 0 {
            return Err(Error::Config(
                "canonical.k and canonical.max_iter must be positive".into(),
            ));
        }
        self.arch.validate()?;
        self.gan.validate()?;
        self.backbone.validate()?;
        self.reid.validate()?;
        if self.eval.use_backbone_b && !(1..=self.canonical.k).contains(&self.eval.fusion_poses) {
            return Err(Error::Config(format!(
                "eval.fusion_poses must be in 1..={}, got {}",
                self.canonical.k, self.eval.fusion_poses
            )));
        }
        Ok(())
    }

    /// SHA-256 of the resolved config's JSON form.
    /// sha256 of the config as JSON. The output directory is left out so a
    /// run directory can be moved.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&Self {
            output_dir: None,
            ..self.clone()
        })
        .expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLock {
    pub config_hash: String,
    pub config: PipelineConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub stage: String,
    pub status: StageStatus,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub duration_s: f64,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn completed(&self, stage: &str, config_hash: &str) -> bool {
        self.entries
            .iter()
            .any(|e| e.stage == stage && e.status == StageStatus::Completed && e.config_hash == config_hash)
    }
}

/// Canonical poses as stored on disk: the medoid keypoints are kept so the
/// pose images can be re-rasterized exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalFile {
    pub source_sample_ids: Vec<String>,
    pub keypoints: Vec<String>,
    pub cluster_sizes: Vec<usize>,
    pub model: PoseClusterModel,
}

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join("run.lock");
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Config(format!(
                        "{} is in use by another process (delete the lock file if that process is gone)",
                        path.display()
                    ))
                } else {
                    Error::io(&path, e)
                }
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config_lock(&self) -> PathBuf {
        self.root.join("config.lock.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn canonical(&self) -> PathBuf {
        self.root.join("canonical_poses")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn synth(&self) -> PathBuf {
        self.root.join("synth")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }
    pub fn losses(&self) -> PathBuf {
        self.root.join("losses")
    }
    pub fn grids(&self) -> PathBuf {
        self.root.join("images").join("grids")
    }
    pub fn gan_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("gan.ckpt")
    }
    pub fn backbone_checkpoint(&self, which: char) -> PathBuf {
        self.checkpoints().join(format!("backbone_{which}.ckpt"))
    }

    pub fn read_lock(&self) -> Result<ConfigLock> {
        read_json(&self.config_lock())
    }

    pub fn read_manifest(&self) -> Result<RunManifest> {
        let path = self.manifest();
        if path.exists() {
            read_json(&path)
        } else {
            Ok(RunManifest::default())
        }
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }
}

/// Models loaded from a run directory.
pub struct TrainedModels {
    pub config: PipelineConfig,
    pub generator: Option<Generator<f32>>,
    pub canon: Option<CanonicalPoseSet>,
    pub backbone_a: Backbone<f32>,
    pub backbone_b: Option<Backbone<f32>>,
}

impl TrainedModels {
    pub fn as_reid_models(&self) -> ReidModels<'_> {
        ReidModels {
            backbone_a: &self.backbone_a,
            backbone_b: self.backbone_b.as_ref(),
            generator: self.generator.as_ref(),
            canon: self.canon.as_ref(),
        }
    }
}

pub fn load_generator(run: &RunDir, arch: &ArchConfig) -> Result<Generator<f32>> {
    let ck = Checkpoint::load(&run.gan_checkpoint())?;
    let (mut g, _) = init_params::<f32>(arch, 0)?;
    ck.restore_params("generator.", &mut g)?;
    Ok(g)
}

pub fn load_backbone(path: &Path, arch: &BackboneArch) -> Result<Backbone<f32>> {
    let ck = Checkpoint::load(path)?;
    let classes = *ck
        .counters
        .get("classes")
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing class count", path.display())))?;
    let mut b = Backbone::<f32>::new(arch, classes as usize, 0)?;
    ck.restore_params("backbone.", &mut b)?;
    Ok(b)
}

pub fn load_canonical(run: &RunDir, config: &PipelineConfig) -> Result<CanonicalPoseSet> {
    let file: CanonicalFile = read_json(&run.canonical().join("canonical.json"))?;
    let schema = config.pose.schema();
    let dims = (config.dims[0], config.dims[1]);
    let poses = file
        .keypoints
        .iter()
        .map(|t| rasterize_pose(&KeypointSet::parse_triples(t)?, &schema, dims))
        .collect::<Result<Vec<_>>>()?;
    Ok(CanonicalPoseSet {
        poses,
        source_sample_ids: file.source_sample_ids,
        model: file.model,
    })
}

/// Loads every model needed by `eval` from a finished run.
pub fn load_models(run: &RunDir, need_b: bool) -> Result<TrainedModels> {
    let config = run.read_lock()?.config;
    let backbone_a = load_backbone(&run.backbone_checkpoint('a'), &config.backbone)?;
    let (generator, canon, backbone_b) = if need_b {
        (
            Some(load_generator(run, &config.arch)?),
            Some(load_canonical(run, &config)?),
            Some(load_backbone(&run.backbone_checkpoint('b'), &config.backbone)?),
        )
    } else {
        (None, None, None)
    };
    Ok(TrainedModels {
        config,
        generator,
        canon,
        backbone_a,
        backbone_b,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Evaluate another run's frozen models on this run's data.
    pub models_from: Option<PathBuf>,
    /// Overrides the configured fusion mode.
    pub mode: Option<FusionMode>,
    /// Overrides `eval.ablations`.
    pub ablations: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    SynthData,
    ClusterPoses,
    TrainGan,
    GenNormalized,
    TrainReid,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::SynthData,
        Stage::ClusterPoses,
        Stage::TrainGan,
        Stage::GenNormalized,
        Stage::TrainReid,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthData => "synth-data",
            Stage::ClusterPoses => "cluster-poses",
            Stage::TrainGan => "train-gan",
            Stage::GenNormalized => "gen-normalized",
            Stage::TrainReid => "train-reid",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

struct StageOutput {
    outputs: Vec<PathBuf>,
    metrics: BTreeMap<String, serde_json::Value>,
}

impl StageOutput {
    fn new() -> Self {
        Self {
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    fn metric(mut self, key: &str, value: impl Serialize) -> Self {
        self.metrics
            .insert(key.into(), serde_json::to_value(value).expect("metric serializes"));
        self
    }
}

/// An open run directory under one resolved config.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub hash: String,
    pub run: RunDir,
    pub force: bool,
    log: Box<dyn FnMut(&str)>,
    _lock: RunLock,
}

impl Pipeline {
    /// Locks `root` and records the config. A directory created under a
    /// different config is refused unless `force` is set.
    pub fn open(root: &Path, config: PipelineConfig, force: bool, log: Box<dyn FnMut(&str)>) -> Result<Self> {
        let config = config.resolve()?;
        let hash = config.hash();
        let lock = RunLock::acquire(root)?;
        let run = RunDir::new(root);
        let lock_path = run.config_lock();
        if lock_path.exists() {
            let existing = run.read_lock()?;
            if existing.config_hash != hash && !force {
                return Err(Error::Config(format!(
                    "{} was created with config {}, current config is {hash}; use --force to overwrite",
                    root.display(),
                    existing.config_hash
                )));
            }
        }
        write_json(
            &lock_path,
            &ConfigLock {
                config_hash: hash.clone(),
                config: config.clone(),
            },
        )?;
        Ok(Self {
            config,
            hash,
            run,
            force,
            log,
            _lock: lock,
        })
    }

    fn say(&mut self, msg: &str) {
        (self.log)(msg);
    }

    fn append_manifest(&self, entry: ManifestEntry) -> Result<()> {
        let mut m = self.run.read_manifest()?;
        m.entries.push(entry);
        write_json(&self.run.manifest(), &m)
    }

    fn run_stage(
        &mut self,
        stage: &str,
        key: &str,
        body: impl FnOnce(&mut Self) -> Result<StageOutput>,
    ) -> Result<bool> {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        if !self.force && self.run.read_manifest()?.completed(stage, key) {
            self.say(&format!("{stage}: up to date, skipping"));
            self.append_manifest(ManifestEntry {
                stage: stage.into(),
                status: StageStatus::Skipped,
                config_hash: key.into(),
                seed: self.config.seed,
                started_unix,
                duration_s: 0.0,
                outputs: Vec::new(),
                metrics: BTreeMap::new(),
            })?;
            return Ok(false);
        }
        self.say(&format!("{stage}: running"));
        let t = Instant::now();
        let out = body(self)?;
        let duration_s = t.elapsed().as_secs_f64();
        self.say(&format!("{stage}: done in {duration_s:.1}s"));
        self.append_manifest(ManifestEntry {
            stage: stage.into(),
            status: StageStatus::Completed,
            config_hash: key.into(),
            seed: self.config.seed,
            started_unix,
            duration_s,
            outputs: out.outputs.iter().map(|p| self.run.rel(p)).collect(),
            metrics: out.metrics,
        })?;
        Ok(true)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.config.data.path.clone().unwrap_or_else(|| self.run.data())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let ds = Dataset::load_dir(&self.dataset_dir())?;
        let dims = ds.dims().unwrap_or((0, 0));
        if [dims.0, dims.1] != self.config.dims {
            return Err(Error::Dataset(format!(
                "dataset images are {dims:?}, config dims are {:?}",
                self.config.dims
            )));
        }
        Ok(ds)
    }

    /// Runs `stage`. Returns false when it was skipped as up to date.
    pub fn stage(&mut self, stage: Stage) -> Result<bool> {
        let hash = self.hash.clone();
        match stage {
            Stage::SynthData => self.run_stage(stage.name(), &hash, |p| p.synth_data()),
            Stage::ClusterPoses => self.run_stage(stage.name(), &hash, |p| p.cluster_poses()),
            Stage::TrainGan => self.run_stage(stage.name(), &hash, |p| p.train_gan()),
            Stage::GenNormalized => self.run_stage(stage.name(), &hash, |p| p.gen_normalized()),
            Stage::TrainReid => self.run_stage(stage.name(), &hash, |p| p.train_reid()),
            Stage::Eval => self.eval(&EvalOptions::default()),
            Stage::Report => self.run_stage(stage.name(), &hash, |p| p.report()),
        }
    }

    pub fn run_all(&mut self) -> Result<()> {
        for stage in Stage::ALL {
            self.stage(stage)?;
        }
        Ok(())
    }

    fn synth_data(&mut self) -> Result<StageOutput> {
        if let Some(path) = &self.config.data.path {
            let ds = Dataset::load_dir(path)?;
            return Ok(StageOutput::new()
                .metric("samples", ds.samples.len())
                .metric("external", path.display().to_string()));
        }
        let ds = generate_dataset(&self.config.data.synth)?;
        let dir = self.run.data();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        ds.write_dir(&dir)?;
        let mut out = StageOutput::new()
            .metric("samples", ds.samples.len())
            .metric("train", ds.split.train.len())
            .metric("query", ds.split.query.len())
            .metric("gallery", ds.split.gallery.len());
        out.outputs.push(dir);
        Ok(out)
    }

    fn cluster_poses(&mut self) -> Result<StageOutput> {
        let ds = self.dataset()?;
        let schema = self.config.pose.schema();
        let train = ds.train()?;
        let poses = train
            .iter()
            .map(|s| Ok((rasterize_pose(&s.keypoints, &schema, s.image.dims())?, s.id.clone())))
            .collect::<Result<Vec<_>>>()?;
        let c = &self.config.canonical;
        let (canon, embeddings) = select_canonical_poses(&poses, c.k, self.config.seed, &c.embedder, c.max_iter)?;
        let index = ds.index();
        let keypoints = canon
            .source_sample_ids
            .iter()
            .map(|id| ds.samples[index[id.as_str()]].keypoints.to_triples())
            .collect();
        let dir = self.run.canonical();
        let file = CanonicalFile {
            source_sample_ids: canon.source_sample_ids.clone(),
            keypoints,
            cluster_sizes: canon.model.cluster_sizes(),
            model: canon.model.clone(),
        };
        write_json(&dir.join("canonical.json"), &file)?;
        for (i, p) in canon.poses.iter().enumerate() {
            p.save_png(&dir.join(format!("pose_{i}.png")))?;
        }
        let refs: Vec<&[f64]> = embeddings.iter().map(|e| e.as_slice()).collect();
        let mut csv = String::from("sample_id,cluster,x,y\n");
        for (((_, id), cluster), [x, y]) in poses.iter().zip(&canon.model.assignments).zip(principal_axes_2d(&refs)) {
            csv.push_str(&format!("{id},{cluster},{x},{y}\n"));
        }
        write_file(&dir.join("projection.csv"), csv.as_bytes())?;
        let mut out = StageOutput::new()
            .metric("k", canon.len())
            .metric("inertia", canon.model.inertia)
            .metric("iterations", canon.model.iterations)
            .metric("cluster_sizes", &file.cluster_sizes);
        out.outputs.push(dir);
        Ok(out)
    }

    fn gan_data(&self) -> Result<(Dataset, PairData)> {
        let ds = self.dataset()?;
        let data = PairData::from_samples(&ds.train()?, &self.config.pose.schema())?;
        Ok((ds, data))
    }

    fn gan_checkpoint(&self, trainer: &GanTrainer) -> Checkpoint {
        let mut ck = Checkpoint::new("gan", trainer.step, &self.hash);
        ck.rng = Some(RngState::capture(&trainer.rng));
        ck.add_params("generator.", &trainer.state.generator);
        ck.add_params("discriminator.", &trainer.state.discriminator);
        ck.add_adam("gen_opt.", &trainer.state.gen_opt);
        ck.add_adam("disc_opt.", &trainer.state.disc_opt);
        ck
    }

    fn restore_gan(&self, trainer: &mut GanTrainer, ck: &Checkpoint) -> Result<()> {
        ck.check_config(&self.hash)?;
        let rng = ck
            .rng
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("GAN checkpoint has no RNG state".into()))?
            .restore()?;
        let s: &mut GanState = &mut trainer.state;
        ck.restore_params("generator.", &mut s.generator)?;
        ck.restore_params("discriminator.", &mut s.discriminator)?;
        ck.restore_adam("gen_opt.", &mut s.gen_opt)?;
        ck.restore_adam("disc_opt.", &mut s.disc_opt)?;
        trainer.rng = rng;
        trainer.step = ck.step;
        Ok(())
    }

    fn train_gan(&mut self) -> Result<StageOutput> {
        let (_, data) = self.gan_data()?;
        let mut trainer = GanTrainer::new(&self.config.arch, &self.config.gan)?;
        let latest = self.run.checkpoints().join("gan_latest.ckpt");
        let csv_path = self.run.losses().join("gan.csv");
        let mut rows: Vec<String> = Vec::new();
        if latest.exists() && !self.force {
            let ck = Checkpoint::load(&latest)?;
            self.restore_gan(&mut trainer, &ck)?;
            // keep the loss rows written before the checkpoint
            if let Ok(text) = fs::read_to_string(&csv_path) {
                rows = text.lines().skip(1).take(ck.step).map(String::from).collect();
            }
            self.say(&format!("train-gan: resuming from step {}", ck.step));
        }
        write_file(&csv_path, format!("{}\n", StepMetrics::CSV_HEADER).as_bytes())?;
        let mut csv = fs::OpenOptions::new()
            .append(true)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?;
        for r in &rows {
            writeln!(csv, "{r}").map_err(|e| Error::io(&csv_path, e))?;
        }
        let every = self.config.gan.checkpoint_every;
        let total = self.config.gan.steps;
        let mut log_lines = Vec::new();
        trainer.run(&data, |t, m| {
            writeln!(csv, "{}", m.csv_row()).map_err(|e| Error::io(&csv_path, e))?;
            if every > 0 && m.step % every == 0 {
                csv.flush().map_err(|e| Error::io(&csv_path, e))?;
                self.gan_checkpoint(t).save(&latest)?;
            }
            if m.step % 250 == 0 || m.step == total {
                log_lines.push(format!(
                    "train-gan: step {}/{total} L_D {:.3} adv {:.3} L1 {:.4}",
                    m.step, m.l_d, m.gen_adv, m.l1
                ));
            }
            Ok(())
        })?;
        csv.flush().map_err(|e| Error::io(&csv_path, e))?;
        for l in log_lines {
            self.say(&l);
        }
        let ck = self.gan_checkpoint(&trainer);
        ck.save(&self.run.gan_checkpoint())?;
        if latest.exists() {
            fs::remove_file(&latest).map_err(|e| Error::io(&latest, e))?;
        }
        let pairs = PairSampler::new(&data.labels, self.config.gan.include_self_pairs)?.all_pairs();
        let l1 = mean_reconstruction_l1(&trainer.state.generator, &data, &pairs, 64)?;
        let grid = self.run.grids().join("train_pairs.png");
        let step = (pairs.len() / 8).max(1);
        let rows = pairs
            .iter()
            .step_by(step)
            .take(8)
            .map(|p| {
                let g = trainer
                    .state
                    .generator
                    .generate(&data.images[p.source], &data.poses[p.target])?;
                hstack(&[&data.images[p.source], &data.poses[p.target], &g])
            })
            .collect::<Result<Vec<_>>>()?;
        vstack(&rows)?.save_png(&grid)?;
        let mut out = StageOutput::new()
            .metric("steps", trainer.step)
            .metric("held_in_l1", l1)
            .metric("final_l1", trainer.history.last().map(|m| m.l1));
        out.outputs.extend([self.run.gan_checkpoint(), csv_path, grid]);
        Ok(out)
    }

    fn gen_normalized(&mut self) -> Result<StageOutput> {
        let ds = self.dataset()?;
        let gen = load_generator(&self.run, &self.config.arch)?;
        let canon = load_canonical(&self.run, &self.config)?;
        let dir = self.run.synth();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let mut grid_rows = Vec::new();
        for s in &ds.samples {
            let outs = synthesize_normalized(&s.image, &canon, &gen)?;
            for (k, img) in outs.iter().enumerate() {
                img.save_png(&dir.join(format!("{}_p{k}.png", s.id)))?;
            }
            if grid_rows.len() < 6 && ds.split.query.contains(&s.id) {
                let mut row: Vec<&Image> = vec![&s.image];
                row.extend(outs.iter());
                grid_rows.push(hstack(&row)?);
            }
        }
        let mut out = StageOutput::new().metric("images", ds.samples.len() * canon.len());
        if !grid_rows.is_empty() {
            let grid = self.run.grids().join("normalized.png");
            let (h, w) = canon.poses[0].dims();
            let blank = Image::filled(h, w, [-1.0; 3]);
            let pose_row: Vec<&Image> = std::iter::once(&blank).chain(canon.poses.iter()).collect();
            let mut rows = vec![hstack(&pose_row)?];
            rows.extend(grid_rows);
            vstack(&rows)?.save_png(&grid)?;
            out.outputs.push(grid);
        }
        out.outputs.push(dir);
        Ok(out)
    }

    fn load_synth(&self, samples: &[&Sample], k: usize) -> Result<(Vec<PersonImage>, Vec<usize>)> {
        let mut images = Vec::with_capacity(samples.len() * k);
        let mut labels = Vec::with_capacity(samples.len() * k);
        for s in samples {
            for c in 0..k {
                images.push(Image::load_png(&self.run.synth().join(format!("{}_p{c}.png", s.id)))?);
                labels.push(s.identity);
            }
        }
        Ok((images, labels))
    }

    fn save_backbone(&self, b: &Backbone<f32>, which: char) -> Result<PathBuf> {
        let mut ck = Checkpoint::new(&format!("backbone_{which}"), 0, &self.hash);
        ck.counters.insert("classes".into(), b.num_classes() as u64);
        ck.add_params("backbone.", b);
        let path = self.run.backbone_checkpoint(which);
        ck.save(&path)?;
        Ok(path)
    }

    fn train_reid(&mut self) -> Result<StageOutput> {
        let ds = self.dataset()?;
        let train = ds.train()?;
        let images: Vec<&PersonImage> = train.iter().map(|s| &s.image).collect();
        let labels: Vec<usize> = train.iter().map(|s| s.identity).collect();
        let (a, report_a) = train_identity_classifier(&images, &labels, &self.config.backbone, &self.config.reid)?;
        let path_a = self.save_backbone(&a, 'a')?;
        self.say(&format!(
            "train-reid: backbone A training accuracy {:.3}",
            report_a.accuracy_history.last().copied().unwrap_or(0.0)
        ));

        let (mut synth, mut synth_labels) = self.load_synth(&train, self.config.canonical.k)?;
        if self.config.reid.include_originals {
            synth.extend(images.iter().map(|i| (*i).clone()));
            synth_labels.extend_from_slice(&labels);
        }
        let refs: Vec<&PersonImage> = synth.iter().collect();
        let (b, report_b) = train_identity_classifier(&refs, &synth_labels, &self.config.backbone, &self.config.reid)?;
        let path_b = self.save_backbone(&b, 'b')?;
        self.say(&format!(
            "train-reid: backbone B training accuracy {:.3} on {} images",
            report_b.accuracy_history.last().copied().unwrap_or(0.0),
            refs.len()
        ));
        let metrics_path = self.run.metrics().join("reid.json");
        let reports: BTreeMap<&str, &ReidTrainReport> = [("backbone_a", &report_a), ("backbone_b", &report_b)].into();
        write_json(&metrics_path, &reports)?;
        let mut out = StageOutput::new()
            .metric("backbone_a_accuracy", report_a.accuracy_history.last())
            .metric("backbone_b_accuracy", report_b.accuracy_history.last())
            .metric("backbone_b_images", refs.len());
        out.outputs.extend([path_a, path_b, metrics_path]);
        Ok(out)
    }

    /// Scores this run's query/gallery split with frozen models (this run's
    /// or another's). No parameter is updated.
    pub fn eval(&mut self, opts: &EvalOptions) -> Result<bool> {
        let models_run = RunDir::new(opts.models_from.clone().unwrap_or_else(|| self.run.root.clone()));
        let mode = opts.mode.unwrap_or(self.config.eval.mode());
        let models_hash = if opts.models_from.is_some() {
            models_run.read_lock()?.config_hash
        } else {
            self.hash.clone()
        };
        let with_ablations = opts.ablations.unwrap_or(self.config.eval.ablations);
        let key = format!("{}|{}|{}|{with_ablations}", self.hash, models_hash, mode.label());
        let key = hex(&Sha256::digest(key.as_bytes()));
        self.run_stage("eval", &key, |p| p.eval_body(&models_run, mode, with_ablations))
    }

    fn eval_body(&mut self, models_run: &RunDir, mode: FusionMode, with_ablations: bool) -> Result<StageOutput> {
        let ds = self.dataset()?;
        let need_b = with_ablations || mode != FusionMode::BackboneA;
        let models = load_models(models_run, need_b)?;
        if models.config.dims != self.config.dims {
            return Err(Error::Config(format!(
                "models were trained on {:?} images, this run uses {:?}",
                models.config.dims, self.config.dims
            )));
        }
        let reid = models.as_reid_models();
        let widest = if need_b {
            FusionMode::Fused {
                poses: models.config.canonical.k,
            }
        } else {
            FusionMode::BackboneA
        };
        let (query, gallery) = (ds.query()?, ds.gallery()?);
        if query.is_empty() || gallery.is_empty() {
            return Err(Error::Dataset(
                "evaluation needs non-empty query and gallery splits".into(),
            ));
        }
        let describe = |set: &[&Sample]| -> Result<Vec<ImageFeatures>> {
            set.iter().map(|s| image_features(&s.image, &reid, widest)).collect()
        };
        let (qf, gf) = (describe(&query)?, describe(&gallery)?);
        let (qm, gm) = (sample_meta(&query), sample_meta(&gallery));
        let protocol = self.config.eval.protocol;
        let report = evaluate_features((&qf, &qm), (&gf, &gm), mode, protocol)?;
        let metrics = self.run.metrics();
        let eval_path = metrics.join("eval.json");
        let cmc_path = metrics.join("cmc.csv");
        write_json(&eval_path, &report)?;
        write_file(&cmc_path, report.cmc_csv().as_bytes())?;
        self.say(&format!(
            "eval ({}): rank-1 {:.3} mAP {:.3} over {} queries ({} excluded)",
            mode.label(),
            report.rank(1).unwrap_or(0.0),
            report.map,
            report.n_queries,
            report.n_excluded
        ));
        let mut out = StageOutput::new()
            .metric("mode", mode.label())
            .metric("rank1", report.rank(1))
            .metric("map", report.map)
            .metric("models_from", models_run.root.display().to_string());
        out.outputs.extend([eval_path, cmc_path]);
        if with_ablations {
            let mut ablations = BTreeMap::new();
            for m in [
                FusionMode::BackboneA,
                FusionMode::Fused { poses: 1 },
                FusionMode::Fused {
                    poses: models.config.canonical.k,
                },
            ] {
                let r = evaluate_features((&qf, &qm), (&gf, &gm), m, protocol)?;
                self.say(&format!(
                    "eval ablation {}: rank-1 {:.3} mAP {:.3}",
                    m.label(),
                    r.rank(1).unwrap_or(0.0),
                    r.map
                ));
                ablations.insert(m.label(), r);
            }
            let path = metrics.join("ablations.json");
            write_json(&path, &ablations)?;
            out.outputs.push(path);
        }
        Ok(out)
    }

    fn report(&mut self) -> Result<StageOutput> {
        let text = render_report(&self.run)?;
        let path = self.run.root.join("report.md");
        write_file(&path, text.as_bytes())?;
        self.say(&text);
        let mut out = StageOutput::new();
        out.outputs.push(path);
        Ok(out)
    }
}

/// Markdown summary of a run's metrics.
pub fn render_report(run: &RunDir) -> Result<String> {
    let lock = run.read_lock()?;
    let eval: EvalReport = read_json(&run.metrics().join("eval.json"))?;
    let mut s = String::new();
    s.push_str(&format!("# Run report: {}\n\n", run.root.display()));
    s.push_str(&format!(
        "- config hash: `{}`\n- seed: {}\n",
        lock.config_hash, lock.config.seed
    ));
    s.push_str(&format!(
        "- protocol: cross_camera_filter={}, multi_query={}\n\n",
        eval.protocol.cross_camera_filter, eval.protocol.multi_query
    ));
    s.push_str("| metric | value |\n|---|---|\n");
    for k in [1, 5, 10] {
        if let Some(a) = eval.rank(k) {
            s.push_str(&format!("| rank-{k} | {a:.4} |\n"));
        }
    }
    s.push_str(&format!(
        "| mAP | {:.4} |\n| queries | {} ({} excluded) |\n",
        eval.map, eval.n_queries, eval.n_excluded
    ));
    let ablation_path = run.metrics().join("ablations.json");
    if ablation_path.exists() {
        let ablations: BTreeMap<String, EvalReport> = read_json(&ablation_path)?;
        s.push_str("\n| features | rank-1 | mAP |\n|---|---|---|\n");
        for (name, r) in &ablations {
            s.push_str(&format!(
                "| {name} | {:.4} | {:.4} |\n",
                r.rank(1).unwrap_or(0.0),
                r.map
            ));
        }
    }
    let manifest = run.read_manifest()?;
    s.push_str("\n| stage | status | seconds |\n|---|---|---|\n");
    for e in &manifest.entries {
        s.push_str(&format!("| {} | {:?} | {:.1} |\n", e.stage, e.status, e.duration_s));
    }
    Ok(s)
}
