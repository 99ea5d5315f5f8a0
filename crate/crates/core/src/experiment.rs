//! End-to-end experiment orchestration.
//!
//! A single TOML config drives the whole pipeline: data, surrogate
//! warm-up, trigger search per attack variant, poisoning, victim
//! training, evaluation, stealth measurement, the defense sweep, spectrum
//! inspection and an optional poison-ratio sweep. Every stage seed is
//! fanned out from one master seed, every report is stamped with the
//! config hash, and a rerun with the same config reproduces all text
//! artifacts byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annealing::{
    optimize_trigger, semi_train_surrogate, AcceptanceMode, AnnealConfig, AnnealResult,
    SearchContext,
};
use crate::classifier::{accuracy, save_model, train, Descriptor, EvalClassifier, TrainConfig};
use crate::dataset::{select_poison_indices, LabeledDataset};
use crate::defenses::{attack_success_rate, defended_accuracy, DefenseSpec};
use crate::error::{Error, Result};
use crate::idx::load_idx;
use crate::image::Image;
use crate::metrics::{batch_stealth, disparity_map, format_db, mean_stealth, StealthReport};
use crate::pnm::save_pnm;
use crate::spectral::{average_log_spectrum, write_spectrum_csv, Spectrum};
use crate::synth::synth_dataset;
use crate::trigger::{
    apply_frequency_trigger, high_frequency_trigger, poison_dataset, save_trigger,
    FrequencyRegion, FrequencyTrigger,
};

/// Derives a stage seed from the master seed and a stage name, so any
/// stage can be rerun in isolation without replaying the ones before it.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// "synthetic" generates digits in memory; "idx" reads IDX files.
    pub source: String,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub synth_train: usize,
    pub synth_test: usize,
    pub train_cap: usize,
    pub test_cap: usize,
}

impl Default for DataSection {
    fn default() -> DataSection {
        DataSection {
            source: "synthetic".into(),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            synth_train: 1000,
            synth_test: 1000,
            train_cap: 1000,
            test_cap: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerSection {
    pub bands: usize,
    pub epsilon: f64,
    pub region_fraction: f64,
}

impl Default for TriggerSection {
    fn default() -> TriggerSection {
        TriggerSection { bands: 3, epsilon: 0.1, region_fraction: 0.183 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonSection {
    pub ratio: f64,
    pub target_label: usize,
}

impl Default for PoisonSection {
    fn default() -> PoisonSection {
        PoisonSection { ratio: 0.05, target_label: 7 }
    }
}

/// Training hyperparameters; unset fields take the pipeline defaults
/// (batch 64, learning rate 0.01, decay 0.1 every 50 epochs) with the
/// epoch count depending on the role (surrogate 1, victim 10).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_decay_factor: Option<f64>,
    pub lr_decay_every: Option<usize>,
}

impl TrainSection {
    /// Resolves to a concrete training config; the epoch default depends
    /// on the role (surrogate 1, victim 10).
    pub fn to_config(&self, default_epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.unwrap_or(default_epochs),
            batch_size: self.batch_size.unwrap_or(64),
            learning_rate: self.learning_rate.unwrap_or(0.01),
            lr_decay_factor: self.lr_decay_factor.unwrap_or(0.1),
            lr_decay_every: self.lr_decay_every.unwrap_or(50),
            seed,
        }
    }

    fn describe(&self, default_epochs: usize) -> String {
        let c = self.to_config(default_epochs, 0);
        format!(
            "epochs={} batch_size={} learning_rate={} lr_decay_factor={} lr_decay_every={}",
            c.epochs, c.batch_size, c.learning_rate, c.lr_decay_factor, c.lr_decay_every
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub initial_temperature: f64,
    pub final_temperature: f64,
    pub cooling_rate: f64,
    pub iters_per_temperature: usize,
    /// "metropolis" or "greedy".
    pub acceptance: String,
    pub retrain_epochs: usize,
    pub lambda_penalty: f64,
}

impl Default for SearchSection {
    fn default() -> SearchSection {
        SearchSection {
            initial_temperature: 1.0,
            final_temperature: 0.1,
            cooling_rate: 0.3,
            iters_per_temperature: 4,
            acceptance: "metropolis".into(),
            retrain_epochs: 10,
            lambda_penalty: 1.0,
        }
    }
}

impl SearchSection {
    fn acceptance_mode(&self) -> Result<AcceptanceMode> {
        match self.acceptance.as_str() {
            "metropolis" => Ok(AcceptanceMode::Metropolis),
            "greedy" => Ok(AcceptanceMode::Greedy),
            other => Err(Error::Argument(format!(
                "acceptance mode '{other}' is neither 'metropolis' nor 'greedy'"
            ))),
        }
    }

    fn anneal_config(&self, seed: u64) -> Result<AnnealConfig> {
        Ok(AnnealConfig {
            initial_temperature: self.initial_temperature,
            final_temperature: self.final_temperature,
            cooling_rate: self.cooling_rate,
            iters_per_temperature: self.iters_per_temperature,
            acceptance: self.acceptance_mode()?,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    pub include_none: bool,
    pub gaussian_windows: Vec<usize>,
    pub wiener_windows: Vec<usize>,
    pub jpeg_qualities: Vec<u32>,
}

impl Default for DefenseSection {
    fn default() -> DefenseSection {
        DefenseSection {
            include_none: true,
            gaussian_windows: vec![3],
            wiener_windows: vec![3],
            jpeg_qualities: vec![50],
        }
    }
}

impl DefenseSection {
    fn sweep(&self) -> Vec<DefenseSpec> {
        let mut list = Vec::new();
        if self.include_none {
            list.push(DefenseSpec::None);
        }
        list.extend(self.gaussian_windows.iter().map(|&w| DefenseSpec::gaussian(w)));
        list.extend(self.wiener_windows.iter().map(|&w| DefenseSpec::Wiener { window: w }));
        list.extend(self.jpeg_qualities.iter().map(|&q| DefenseSpec::Jpeg { quality: q }));
        list
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSection {
    pub low: bool,
    pub full: bool,
    pub high: bool,
}

impl Default for VariantSection {
    fn default() -> VariantSection {
        VariantSection { low: true, full: true, high: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StealthSection {
    pub pairs: usize,
    pub amplification: f64,
}

impl Default for StealthSection {
    fn default() -> StealthSection {
        StealthSection { pairs: 500, amplification: 5.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Poison ratios for the optional sweep; everything else stays fixed.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub master_seed: u64,
    /// Layer descriptor text; omitted means the stock small CNN sized to
    /// the dataset's class count.
    pub model: Option<String>,
    pub data: DataSection,
    pub trigger: TriggerSection,
    pub poison: PoisonSection,
    pub surrogate: TrainSection,
    pub victim: TrainSection,
    pub search: SearchSection,
    pub defenses: DefenseSection,
    pub variants: VariantSection,
    pub stealth: StealthSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            output_dir: PathBuf::from("artifacts"),
            master_seed: 42,
            model: None,
            data: DataSection::default(),
            trigger: TriggerSection::default(),
            poison: PoisonSection::default(),
            surrogate: TrainSection::default(),
            victim: TrainSection::default(),
            search: SearchSection::default(),
            defenses: DefenseSection::default(),
            variants: VariantSection::default(),
            stealth: StealthSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match self.data.source.as_str() {
            "synthetic" => {
                if self.data.synth_train == 0 || self.data.synth_test == 0 {
                    return Err(Error::Argument("synthetic set sizes must be positive".into()));
                }
            }
            "idx" => {
                for (name, path) in [
                    ("train_images", &self.data.train_images),
                    ("train_labels", &self.data.train_labels),
                    ("test_images", &self.data.test_images),
                    ("test_labels", &self.data.test_labels),
                ] {
                    let path = path.as_ref().ok_or_else(|| {
                        Error::Argument(format!("idx source needs data.{name}"))
                    })?;
                    if !path.exists() {
                        return Err(Error::Argument(format!(
                            "data.{name} path {} does not exist",
                            path.display()
                        )));
                    }
                }
            }
            other => {
                return Err(Error::Argument(format!(
                    "data source '{other}' is neither 'synthetic' nor 'idx'"
                )));
            }
        }
        if self.data.train_cap == 0 || self.data.test_cap == 0 {
            return Err(Error::Argument("subset caps must be positive".into()));
        }
        if self.trigger.bands == 0 {
            return Err(Error::Argument("trigger needs at least one band".into()));
        }
        if !(self.trigger.epsilon > 0.0) {
            return Err(Error::Argument(format!(
                "epsilon {} must be positive",
                self.trigger.epsilon
            )));
        }
        if !(self.trigger.region_fraction > 0.0 && self.trigger.region_fraction <= 1.0) {
            return Err(Error::Argument(format!(
                "region fraction {} outside (0, 1]",
                self.trigger.region_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.poison.ratio) {
            return Err(Error::Argument(format!(
                "poison ratio {} outside [0, 1]",
                self.poison.ratio
            )));
        }
        self.search.anneal_config(0)?.validate()?;
        if !(self.search.lambda_penalty >= 0.0) {
            return Err(Error::Argument("lambda_penalty must be non-negative".into()));
        }
        if !self.variants.low && !self.variants.full && !self.variants.high {
            return Err(Error::Argument("enable at least one attack variant".into()));
        }
        if self.stealth.pairs == 0 || !(self.stealth.amplification > 0.0) {
            return Err(Error::Argument("stealth needs pairs >= 1 and amplification > 0".into()));
        }
        for &r in &self.sweep.ratios {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Argument(format!("sweep ratio {r} outside [0, 1]")));
            }
        }
        if let Some(text) = &self.model {
            text.parse::<Descriptor>()?;
        }
        Ok(())
    }

    /// Canonical text of every resolved setting. Output directory is
    /// deliberately excluded: where artifacts land does not change what
    /// was computed.
    pub fn canonical_description(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        let path = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into())
        };
        let _ = writeln!(s, "master_seed={}", self.master_seed);
        let _ = writeln!(s, "model={}", self.model.clone().unwrap_or_else(|| "auto".into()));
        let _ = writeln!(
            s,
            "data source={} train_images={} train_labels={} test_images={} test_labels={} \
             synth_train={} synth_test={} train_cap={} test_cap={}",
            d.source,
            path(&d.train_images),
            path(&d.train_labels),
            path(&d.test_images),
            path(&d.test_labels),
            d.synth_train,
            d.synth_test,
            d.train_cap,
            d.test_cap
        );
        let _ = writeln!(
            s,
            "trigger bands={} epsilon={} region_fraction={}",
            self.trigger.bands, self.trigger.epsilon, self.trigger.region_fraction
        );
        let _ = writeln!(
            s,
            "poison ratio={} target_label={}",
            self.poison.ratio, self.poison.target_label
        );
        let _ = writeln!(s, "surrogate {}", self.surrogate.describe(1));
        let _ = writeln!(s, "victim {}", self.victim.describe(10));
        let sc = &self.search;
        let _ = writeln!(
            s,
            "search t0={} tf={} alpha={} iters={} acceptance={} retrain_epochs={} lambda={}",
            sc.initial_temperature,
            sc.final_temperature,
            sc.cooling_rate,
            sc.iters_per_temperature,
            sc.acceptance,
            sc.retrain_epochs,
            sc.lambda_penalty
        );
        let df = &self.defenses;
        let _ = writeln!(
            s,
            "defenses none={} gaussian={:?} wiener={:?} jpeg={:?}",
            df.include_none, df.gaussian_windows, df.wiener_windows, df.jpeg_qualities
        );
        let _ = writeln!(
            s,
            "variants low={} full={} high={}",
            self.variants.low, self.variants.full, self.variants.high
        );
        let _ = writeln!(
            s,
            "stealth pairs={} amplification={}",
            self.stealth.pairs, self.stealth.amplification
        );
        let _ = writeln!(s, "sweep ratios={:?}", self.sweep.ratios);
        s
    }

    /// Short hex digest identifying the resolved configuration.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_description().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads a config file; missing keys take their documented defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("config: {e}")))
}

// ---------------------------------------------------------------- runs

/// Which trigger placement an experiment row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackVariant {
    /// Searched over the low-frequency region.
    Low,
    /// Searched over the full spectrum (placement control).
    Full,
    /// Handcrafted in the bottom-right quadrant (fragility control).
    High,
}

impl AttackVariant {
    pub fn label(self) -> &'static str {
        match self {
            AttackVariant::Low => "low",
            AttackVariant::Full => "full",
            AttackVariant::High => "high",
        }
    }
}

impl std::str::FromStr for AttackVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<AttackVariant> {
        match s {
            "low" => Ok(AttackVariant::Low),
            "full" => Ok(AttackVariant::Full),
            "high" => Ok(AttackVariant::High),
            other => Err(Error::Argument(format!(
                "variant '{other}' is not one of low, full, high"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub variant: AttackVariant,
    pub trigger: FrequencyTrigger,
    pub clean_accuracy: f64,
    pub attack_success: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    pub config_hash: String,
    pub variants: Vec<VariantOutcome>,
    pub mean_stealth: StealthReport,
    /// (ratio, clean accuracy, attack success) rows when a sweep ran.
    pub sweep: Vec<(f64, f64, f64)>,
}

/// Writes a CSV report: `#`-prefixed comment lines (config hash and seed
/// first), a header row, then the data rows.
pub fn write_report(path: &Path, comments: &[String], header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    let _ = writeln!(out, "{header}");
    for r in rows {
        let _ = writeln!(out, "{r}");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads and caps the train/test datasets named by the config. Also used
/// by the standalone subcommands so they see exactly the pipeline's data.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let d = &config.data;
    let (train, test) = match d.source.as_str() {
        "synthetic" => (
            synth_dataset(d.synth_train, stage_seed(config.master_seed, "data-train"))?,
            synth_dataset(d.synth_test, stage_seed(config.master_seed, "data-test"))?,
        ),
        "idx" => {
            let need = |p: &Option<PathBuf>, name: &str| {
                p.clone().ok_or_else(|| Error::Argument(format!("idx source needs data.{name}")))
            };
            (
                load_idx(
                    &need(&d.train_images, "train_images")?,
                    &need(&d.train_labels, "train_labels")?,
                )?,
                load_idx(
                    &need(&d.test_images, "test_images")?,
                    &need(&d.test_labels, "test_labels")?,
                )?,
            )
        }
        other => return Err(Error::Argument(format!("unknown data source '{other}'"))),
    };
    let train = train.truncated(d.train_cap);
    let test = test.truncated(d.test_cap);
    if train.image_shape()? != test.image_shape()? {
        return Err(Error::Dimension("train and test image shapes differ".into()));
    }
    Ok((train, test))
}

/// Resolves the model architecture: an explicit descriptor string wins,
/// otherwise the stock small CNN sized to the class count.
pub fn resolve_descriptor(config: &ExperimentConfig, num_classes: usize) -> Result<Descriptor> {
    match &config.model {
        Some(text) => text.parse::<Descriptor>(),
        None => Ok(Descriptor::small_cnn(num_classes)),
    }
}

/// Initializes and warm-trains the surrogate with the pipeline's seeds.
pub fn build_surrogate(
    config: &ExperimentConfig,
    train_set: &LabeledDataset,
) -> Result<EvalClassifier> {
    let descriptor = resolve_descriptor(config, train_set.num_classes())?;
    let warmup = config
        .surrogate
        .to_config(1, stage_seed(config.master_seed, "surrogate-train"));
    semi_train_surrogate(
        &descriptor,
        train_set,
        stage_seed(config.master_seed, "surrogate-init"),
        &warmup,
    )
}

/// Produces the trigger for one attack variant: an annealing search for
/// the low and full placements (trace included), the handcrafted
/// construction for the high-frequency control (no trace).
pub fn search_variant(
    config: &ExperimentConfig,
    surrogate: &EvalClassifier,
    train_set: &LabeledDataset,
    variant: AttackVariant,
) -> Result<(FrequencyTrigger, Option<AnnealResult>)> {
    let master = config.master_seed;
    let (h, w, ch) = train_set.image_shape()?;
    if let AttackVariant::High = variant {
        let trigger = high_frequency_trigger(
            h,
            w,
            ch,
            config.trigger.bands,
            config.trigger.epsilon,
            stage_seed(master, "trigger-high"),
        )?;
        return Ok((trigger, None));
    }
    let region = match variant {
        AttackVariant::Low => {
            FrequencyRegion::low_frequency(h, w, config.trigger.region_fraction)?
        }
        _ => FrequencyRegion::full(h, w)?,
    };
    let poison_indices =
        select_poison_indices(train_set, config.poison.ratio, stage_seed(master, "poison-select"))?;
    let retrain_cfg = TrainConfig {
        epochs: config.search.retrain_epochs,
        seed: stage_seed(master, "retrain"),
        ..config.surrogate.to_config(1, 0)
    };
    let ctx = SearchContext::new(
        surrogate,
        train_set,
        &poison_indices,
        config.poison.target_label,
        retrain_cfg,
        config.search.lambda_penalty,
    )?;
    let anneal = config
        .search
        .anneal_config(stage_seed(master, &format!("search-{}", variant.label())))?;
    let result =
        optimize_trigger(&anneal, &ctx, &region, config.trigger.bands, config.trigger.epsilon)?;
    Ok((result.best_trigger.clone(), Some(result)))
}

/// Deterministically picks `count` distinct indices below `n`.
fn pick_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = count.min(n);
    for i in 0..count {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    order.truncate(count);
    order
}

/// Writes an annealing trace as CSV with a running best column.
pub fn write_trace(path: &Path, stamp: &str, result: &AnnealResult) -> Result<()> {
    let mut best = f64::INFINITY;
    let rows: Vec<String> = result
        .trace
        .iter()
        .map(|e| {
            if e.accepted && e.objective.total < best {
                best = e.objective.total;
            }
            format!(
                "{},{},{},{},{},{},{}",
                e.temperature,
                e.iteration,
                e.objective.backdoor_loss,
                e.objective.penalty,
                e.objective.total,
                e.accepted,
                best
            )
        })
        .collect();
    write_report(
        path,
        &[stamp.to_string()],
        "temperature,iteration,backdoor_loss,penalty,total,accepted,best_total",
        &rows,
    )
}

/// Renders a non-negative single-plane spectrum (already in log units) as
/// a peak-normalized grayscale image.
pub fn spectrum_image(spectrum: &Spectrum) -> Result<Image> {
    let (h, w, _) = spectrum.shape();
    let mut values: Vec<f64> = spectrum.coeffs().to_vec();
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    Image::new(h, w, 1, values)
}

/// Runs the full pipeline and drops all artifacts in the output
/// directory. Artifacts written before a failing stage are kept.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let hash = config.config_hash();
    let master = config.master_seed;
    let stamp = format!("config_hash={hash} seed={master}");
    fs::write(out.join("resolved_config.txt"), config.canonical_description())?;

    // Data.
    let (train_set, test_set) = prepare_data(config).map_err(|e| e.in_stage("data"))?;
    let (h, w, ch) = train_set.image_shape().map_err(|e| e.in_stage("data"))?;
    let num_classes = train_set.num_classes();
    let target = config.poison.target_label;
    if target >= num_classes {
        return Err(Error::Argument(format!(
            "target label {target} outside 0..{num_classes}"
        ))
        .in_stage("data"));
    }
    let descriptor = resolve_descriptor(config, num_classes).map_err(|e| e.in_stage("data"))?;

    // Surrogate warm-up, shared by every searched variant.
    let surrogate =
        build_surrogate(config, &train_set).map_err(|e| e.in_stage("surrogate"))?;
    save_model(&surrogate, &out.join("surrogate.ckpt")).map_err(|e| e.in_stage("surrogate"))?;

    // Poison subset, shared across variants so comparisons are clean.
    let poison_indices =
        select_poison_indices(&train_set, config.poison.ratio, stage_seed(master, "poison-select"))
            .map_err(|e| e.in_stage("poison"))?;
    if poison_indices.is_empty() {
        return Err(Error::Argument(format!(
            "poison ratio {} selects no samples from {}",
            config.poison.ratio,
            train_set.len()
        ))
        .in_stage("poison"));
    }
    let manifest_rows: Vec<String> = poison_indices
        .iter()
        .map(|&i| format!("{i},{}", train_set.label(i)))
        .collect();
    write_report(
        &out.join("poison_manifest.csv"),
        &[stamp.clone(), format!("target_label={target} ratio={}", config.poison.ratio)],
        "index,original_label",
        &manifest_rows,
    )
    .map_err(|e| e.in_stage("poison"))?;

    // Triggers per variant.
    let mut variants: Vec<AttackVariant> = Vec::new();
    if config.variants.low {
        variants.push(AttackVariant::Low);
    }
    if config.variants.full {
        variants.push(AttackVariant::Full);
    }
    if config.variants.high {
        variants.push(AttackVariant::High);
    }

    let mut triggers: Vec<(AttackVariant, FrequencyTrigger)> = Vec::new();
    for &variant in &variants {
        let (trigger, result) = search_variant(config, &surrogate, &train_set, variant)
            .map_err(|e| e.in_stage("search"))?;
        if let Some(result) = &result {
            write_trace(&out.join(format!("sa_trace_{}.csv", variant.label())), &stamp, result)
                .map_err(|e| e.in_stage("search"))?;
        }
        save_trigger(
            &trigger,
            &out.join(format!("trigger_{}.toml", variant.label())),
            Some(&stamp),
        )
        .map_err(|e| e.in_stage("search"))?;
        triggers.push((variant, trigger));
    }

    // Victims: one poisoned training run per variant.
    let victim_of = |variant: AttackVariant, trigger: &FrequencyTrigger, indices: &[usize]| {
        let label = variant.label();
        let poisoned = poison_dataset(&train_set, indices, trigger, target)?;
        let init = EvalClassifier::init(
            &descriptor,
            (h, w, ch),
            stage_seed(master, &format!("victim-{label}-init")),
        )?;
        let cfg = config
            .victim
            .to_config(10, stage_seed(master, &format!("victim-{label}-train")));
        train(&init, &poisoned, &cfg)
    };

    let mut outcomes: Vec<VariantOutcome> = Vec::new();
    let mut victims: Vec<EvalClassifier> = Vec::new();
    for (variant, trigger) in &triggers {
        let victim =
            victim_of(*variant, trigger, &poison_indices).map_err(|e| e.in_stage("victim"))?;
        save_model(&victim, &out.join(format!("victim_{}.ckpt", variant.label())))
            .map_err(|e| e.in_stage("victim"))?;

        let acc = accuracy(&victim, &test_set).map_err(|e| e.in_stage("evaluate"))?;
        let asr = attack_success_rate(&victim, &test_set, trigger, target, &DefenseSpec::None)
            .map_err(|e| e.in_stage("evaluate"))?;
        outcomes.push(VariantOutcome {
            variant: *variant,
            trigger: trigger.clone(),
            clean_accuracy: acc,
            attack_success: asr,
        });
        victims.push(victim);
    }
    let metric_rows: Vec<String> = outcomes
        .iter()
        .map(|o| format!("{},{},{}", o.variant.label(), o.clean_accuracy, o.attack_success))
        .collect();
    write_report(&out.join("metrics.csv"), &[stamp.clone()], "variant,clean_acc,asr", &metric_rows)
        .map_err(|e| e.in_stage("evaluate"))?;

    // Stealth: the first variant is the attack under study; controls are
    // only there for robustness comparisons.
    let primary = &triggers[0];
    let pair_seed = stage_seed(master, "stealth-pairs");
    let pair_count = config.stealth.pairs.min(test_set.len());
    let pair_indices = pick_indices(test_set.len(), pair_count, pair_seed);
    let clean_pairs: Vec<Image> =
        pair_indices.iter().map(|&i| test_set.image(i).clone()).collect();
    let poisoned_pairs: Vec<Image> = crate::par::map_slice(&clean_pairs, |im| {
        apply_frequency_trigger(im, &primary.1)
    })
    .into_iter()
    .collect::<Result<_>>()
    .map_err(|e| e.in_stage("stealth"))?;
    let reports = batch_stealth(&clean_pairs, &poisoned_pairs).map_err(|e| e.in_stage("stealth"))?;
    let mean = mean_stealth(&reports).map_err(|e| e.in_stage("stealth"))?;
    let mut stealth_rows: Vec<String> = pair_indices
        .iter()
        .zip(&reports)
        .map(|(&i, r)| format!("{i},{},{},{}", format_db(r.psnr), r.ssim, r.freq_l2))
        .collect();
    stealth_rows.push(format!(
        "# mean psnr={} ssim={} freq_l2={}",
        format_db(mean.psnr),
        mean.ssim,
        mean.freq_l2
    ));
    write_report(
        &out.join("stealth.csv"),
        &[stamp.clone(), format!("variant={} pair_seed={pair_seed}", primary.0.label())],
        "sample_id,psnr,ssim,freq_l2",
        &stealth_rows,
    )
    .map_err(|e| e.in_stage("stealth"))?;

    // Defense sweep: every variant against every configured defense.
    let sweep = config.defenses.sweep();
    let mut robustness_rows = Vec::new();
    for ((variant, trigger), victim) in triggers.iter().zip(&victims) {
        for defense in &sweep {
            let acc =
                defended_accuracy(victim, &test_set, defense).map_err(|e| e.in_stage("defend"))?;
            let asr = attack_success_rate(victim, &test_set, trigger, target, defense)
                .map_err(|e| e.in_stage("defend"))?;
            robustness_rows.push(format!(
                "{},{},{},{},{}",
                variant.label(),
                defense.kind(),
                defense.param(),
                acc,
                asr
            ));
        }
    }
    write_report(
        &out.join("robustness.csv"),
        &[stamp.clone()],
        "attack_variant,defense,param,acc,asr",
        &robustness_rows,
    )
    .map_err(|e| e.in_stage("defend"))?;

    // Inspection: averaged log spectra and a per-variant disparity map.
    let inspect = |images: &[Image], name: &str| -> Result<()> {
        let spectrum = average_log_spectrum(images)?;
        write_spectrum_csv(&spectrum, &out.join(format!("spectrum_{name}.csv")), Some(&stamp))?;
        save_pnm(&spectrum_image(&spectrum)?, &out.join(format!("spectrum_{name}.pgm")))
    };
    inspect(&clean_pairs, "clean").map_err(|e| e.in_stage("inspect"))?;
    inspect(&poisoned_pairs, &format!("poisoned_{}", primary.0.label()))
        .map_err(|e| e.in_stage("inspect"))?;
    for (variant, trigger) in &triggers {
        let sample = &clean_pairs[0];
        let modified =
            apply_frequency_trigger(sample, trigger).map_err(|e| e.in_stage("inspect"))?;
        let (map, _) = disparity_map(sample, &modified, config.stealth.amplification)
            .map_err(|e| e.in_stage("inspect"))?;
        save_pnm(&map, &out.join(format!("disparity_{}.pgm", variant.label())))
            .map_err(|e| e.in_stage("inspect"))?;
    }

    // Optional poison-ratio sweep with the primary trigger; only the
    // ratio moves, every seed stays as in the main run.
    let mut sweep_rows = Vec::new();
    if !config.sweep.ratios.is_empty() {
        let mut rows = Vec::new();
        for &ratio in &config.sweep.ratios {
            let indices =
                select_poison_indices(&train_set, ratio, stage_seed(master, "poison-select"))
                    .map_err(|e| e.in_stage("sweep"))?;
            if indices.is_empty() {
                rows.push(format!("{ratio},,"));
                continue;
            }
            let victim = victim_of(primary.0, &primary.1, &indices)
                .map_err(|e| e.in_stage("sweep"))?;
            let acc = accuracy(&victim, &test_set).map_err(|e| e.in_stage("sweep"))?;
            let asr =
                attack_success_rate(&victim, &test_set, &primary.1, target, &DefenseSpec::None)
                    .map_err(|e| e.in_stage("sweep"))?;
            rows.push(format!("{ratio},{acc},{asr}"));
            sweep_rows.push((ratio, acc, asr));
        }
        write_report(
            &out.join("sweep.csv"),
            &[stamp.clone(), format!("variant={}", primary.0.label())],
            "ratio,acc,asr",
            &rows,
        )
        .map_err(|e| e.in_stage("sweep"))?;
    }

    Ok(ExperimentSummary {
        output_dir: out.clone(),
        config_hash: hash,
        variants: outcomes,
        mean_stealth: mean,
        sweep: sweep_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.output_dir = dir.to_path_buf();
        config.master_seed = 7;
        config.data.synth_train = 30;
        config.data.synth_test = 20;
        config.data.train_cap = 30;
        config.data.test_cap = 20;
        config.trigger.bands = 2;
        config.poison.ratio = 0.1;
        config.surrogate.epochs = Some(1);
        config.victim.epochs = Some(1);
        config.search.initial_temperature = 1.0;
        config.search.final_temperature = 0.5;
        config.search.cooling_rate = 0.5;
        config.search.iters_per_temperature = 1;
        config.stealth.pairs = 10;
        config
    }

    #[test]
    fn stage_seeds_are_stable_and_distinct() {
        let a = stage_seed(42, "surrogate-init");
        assert_eq!(a, stage_seed(42, "surrogate-init"));
        assert_ne!(a, stage_seed(42, "surrogate-train"));
        assert_ne!(a, stage_seed(43, "surrogate-init"));
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.trigger.bands, 3);
        assert_eq!(c.trigger.epsilon, 0.1);
        assert_eq!(c.poison.ratio, 0.05);
        assert_eq!(c.poison.target_label, 7);
        assert_eq!(c.data.train_cap, 1000);
        let surrogate = c.surrogate.to_config(1, 0);
        assert_eq!(surrogate.epochs, 1);
        assert_eq!(surrogate.batch_size, 64);
        assert_eq!(surrogate.learning_rate, 0.01);
        let victim = c.victim.to_config(10, 0);
        assert_eq!(victim.epochs, 10);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn empty_config_file_parses_to_defaults() {
        let parsed: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(parsed, ExperimentConfig::default());
        let partial: ExperimentConfig =
            toml::from_str("[trigger]\nepsilon = 0.2\n").unwrap();
        assert_eq!(partial.trigger.epsilon, 0.2);
        assert_eq!(partial.trigger.bands, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("unknown_key = 1\n");
        assert!(err.is_err());
        let err = toml::from_str::<ExperimentConfig>("[trigger]\nwidth = 5\n");
        assert!(err.is_err());
    }

    #[test]
    fn validation_rejects_bad_settings() {
        let mut c = ExperimentConfig::default();
        c.data.source = "csv".into();
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::default();
        c.data.source = "idx".into();
        assert!(c.validate().is_err(), "idx without paths must fail");

        let mut c = ExperimentConfig::default();
        c.trigger.region_fraction = 1.5;
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::default();
        c.search.acceptance = "warm".into();
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::default();
        c.variants = VariantSection { low: false, full: false, high: false };
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::default();
        c.model = Some("dense(10)-banana".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_hash_tracks_content_not_location() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = ExperimentConfig::default();
        c.master_seed = 43;
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 16);
    }

    #[test]
    fn smoke_run_produces_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let summary = run_experiment(&config).unwrap();

        assert_eq!(summary.variants.len(), 3);
        for name in [
            "resolved_config.txt",
            "surrogate.ckpt",
            "poison_manifest.csv",
            "sa_trace_low.csv",
            "sa_trace_full.csv",
            "trigger_low.toml",
            "trigger_full.toml",
            "trigger_high.toml",
            "victim_low.ckpt",
            "victim_full.ckpt",
            "victim_high.ckpt",
            "metrics.csv",
            "stealth.csv",
            "robustness.csv",
            "spectrum_clean.csv",
            "spectrum_clean.pgm",
            "spectrum_poisoned_low.csv",
            "spectrum_poisoned_low.pgm",
            "disparity_low.pgm",
            "disparity_full.pgm",
            "disparity_high.pgm",
        ] {
            assert!(dir.path().join(name).exists(), "missing artifact {name}");
        }

        // Schedule: 1.0 -> 0.5 at alpha 0.5 runs two temperature blocks
        // of one iteration each, plus the init entry.
        let trace = fs::read_to_string(dir.path().join("sa_trace_low.csv")).unwrap();
        let data_lines = trace.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(data_lines, 1 + 3);

        // One robustness row per variant x defense combination.
        let robustness = fs::read_to_string(dir.path().join("robustness.csv")).unwrap();
        let rows = robustness.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(rows, 1 + 3 * 4);

        // Reports are stamped.
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with(&format!(
            "# config_hash={} seed=7",
            summary.config_hash
        )));

        // ASR and ACC are defined probabilities.
        for o in &summary.variants {
            assert!((0.0..=1.0).contains(&o.clean_accuracy));
            assert!((0.0..=1.0).contains(&o.attack_success));
            assert!(o.trigger.max_delta() <= config.trigger.epsilon + 1e-12);
        }
        assert!(summary.mean_stealth.ssim <= 1.0);
    }

    #[test]
    fn sweep_mode_emits_one_row_per_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.variants = VariantSection { low: true, full: false, high: false };
        config.sweep.ratios = vec![0.1, 0.2];
        let summary = run_experiment(&config).unwrap();
        assert_eq!(summary.sweep.len(), 2);
        let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let rows: Vec<&str> = sweep.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 1 + 2);
        assert!(rows[1].starts_with("0.1,"));
        assert!(rows[2].starts_with("0.2,"));
    }
}
