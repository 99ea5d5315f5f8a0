//! Command-line front end: the full pipeline plus each stage in
//! isolation, all driven by the same config file and stage seeds so a
//! subcommand reproduces exactly what the pipeline would have done.

use std::fs;
use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use freqdoor::classifier::{
    accuracy, gradient_check, load_model, save_model, Descriptor, EvalClassifier,
};
use freqdoor::dataset::select_poison_indices;
use freqdoor::defenses::{
    attack_success_rate, defended_accuracy, strip_entropy, DefenseSpec,
};
use freqdoor::experiment::{
    build_surrogate, load_config, prepare_data, resolve_descriptor, run_experiment,
    search_variant, spectrum_image, stage_seed, write_report, write_trace, AttackVariant,
    ExperimentConfig,
};
use freqdoor::idx::{load_idx, save_idx};
use freqdoor::image::Image;
use freqdoor::metrics::{disparity_map, format_db};
use freqdoor::pnm::save_pnm;
use freqdoor::spectral::{average_log_spectrum, write_spectrum_csv};
use freqdoor::synth::synth_dataset;
use freqdoor::trigger::{apply_frequency_trigger, load_trigger, poison_dataset, save_trigger};
use freqdoor::{Error, Result};

/// Output-directory override; flags still take precedence over it.
const OUTPUT_DIR_VAR: &str = "FREQDOOR_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "freqdoor", version, about = "Frequency-domain backdoor experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment pipeline from a config file.
    Run(RunArgs),
    /// Search for a trigger and save it (annealing stage only).
    Search(SearchArgs),
    /// Poison a training set with a saved trigger, writing IDX files.
    Poison(PoisonArgs),
    /// Train a victim on an IDX dataset with the config's seeds.
    Train(TrainArgs),
    /// Report clean accuracy and, with a trigger, attack success rate.
    Evaluate(EvaluateArgs),
    /// Measure one defense against a saved trigger.
    Defend(DefendArgs),
    /// Write averaged log spectra and a disparity map for two sets.
    Inspect(InspectArgs),
    /// Run the blended-input entropy detector over a dataset.
    Strip(StripArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic digit dataset as an IDX pair.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write artifacts (beats the env var and the config).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    master_seed: Option<u64>,
    /// Poison ratios for the sweep stage, e.g. --sweep 0.01,0.05,0.1
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Trigger placement: low, full or high.
    #[arg(long, default_value = "low")]
    variant: String,
    /// Reuse a surrogate checkpoint instead of warm-training one.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Where to save the surrogate if one is trained here.
    #[arg(long)]
    surrogate_out: Option<PathBuf>,
    #[arg(long)]
    trigger_out: PathBuf,
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct PoisonArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    trigger: PathBuf,
    #[arg(long)]
    images_out: PathBuf,
    #[arg(long)]
    labels_out: PathBuf,
    #[arg(long)]
    manifest_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    model_out: PathBuf,
    /// Variant name selecting the victim seed stream.
    #[arg(long, default_value = "low")]
    variant: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    trigger: Option<PathBuf>,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct DefendArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    trigger: PathBuf,
    /// none, gaussian, wiener or jpeg.
    #[arg(long)]
    defense: String,
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Gaussian standard deviation; derived from the window when unset.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 50)]
    quality: u32,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    images_a: PathBuf,
    #[arg(long)]
    labels_a: PathBuf,
    #[arg(long)]
    images_b: PathBuf,
    #[arg(long)]
    labels_b: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Disparity amplification; defaults to the config's value.
    #[arg(long)]
    amplification: Option<f64>,
}

#[derive(Args)]
struct StripArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Also score each image with this trigger applied.
    #[arg(long)]
    trigger: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    overlays: usize,
    #[arg(long, default_value_t = 0.5)]
    blend: f64,
    /// How many dataset images to score.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Layer descriptor, e.g. conv(8,3,1)-relu-maxpool(2)-dense(10)-softmax
    #[arg(long)]
    descriptor: Option<String>,
    #[arg(long, default_value_t = 12)]
    height: usize,
    #[arg(long, default_value_t = 12)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    label: usize,
    /// Parameters sampled per layer.
    #[arg(long, default_value_t = 8)]
    per_layer: usize,
    /// Seeds the model, the probe image and the parameter sample. Finite
    /// differences are invalid within the step of a relu kink or pool
    /// tie, so a surprising failure is worth rechecking under other seeds.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    images_out: PathBuf,
    #[arg(long)]
    labels_out: PathBuf,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 3,
        Error::Stage { .. } => 5,
        _ => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e}");
        process::exit(exit_code(&e));
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(a) => cmd_run(a),
        Command::Search(a) => cmd_search(a),
        Command::Poison(a) => cmd_poison(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Defend(a) => cmd_defend(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Strip(a) => cmd_strip(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn read_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let config = load_config(path)?;
    config.validate()?;
    Ok(config)
}

fn stamp_of(config: &ExperimentConfig) -> String {
    format!("config_hash={} seed={}", config.config_hash(), config.master_seed)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(dir) = std::env::var(OUTPUT_DIR_VAR) {
        if !dir.is_empty() {
            config.output_dir = PathBuf::from(dir);
        }
    }
    if let Some(dir) = a.output_dir {
        config.output_dir = dir;
    }
    if let Some(seed) = a.master_seed {
        config.master_seed = seed;
    }
    if let Some(ratios) = a.sweep {
        config.sweep.ratios = ratios;
    }
    let summary = run_experiment(&config)?;
    println!(
        "config_hash={} artifacts={}",
        summary.config_hash,
        summary.output_dir.display()
    );
    for v in &summary.variants {
        println!(
            "variant={} clean_acc={} asr={}",
            v.variant.label(),
            v.clean_accuracy,
            v.attack_success
        );
    }
    let m = &summary.mean_stealth;
    println!(
        "stealth mean_psnr={} mean_ssim={} mean_freq_l2={}",
        format_db(m.psnr),
        m.ssim,
        m.freq_l2
    );
    for (ratio, acc, asr) in &summary.sweep {
        println!("sweep ratio={ratio} clean_acc={acc} asr={asr}");
    }
    Ok(())
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    let config = read_config(&a.config)?;
    let variant: AttackVariant = a.variant.parse()?;
    let (train_set, _) = prepare_data(&config)?;
    let surrogate = match &a.surrogate {
        Some(path) => load_model(path)?,
        None => {
            let model = build_surrogate(&config, &train_set)?;
            if let Some(path) = &a.surrogate_out {
                save_model(&model, path)?;
            }
            model
        }
    };
    let (trigger, result) = search_variant(&config, &surrogate, &train_set, variant)?;
    let stamp = stamp_of(&config);
    if let Some(result) = &result {
        if let Some(path) = &a.trace_out {
            write_trace(path, &stamp, result)?;
        }
        println!(
            "evaluations={} best_objective={}",
            result.evaluations, result.best_objective.total
        );
    }
    save_trigger(&trigger, &a.trigger_out, Some(&stamp))?;
    println!(
        "variant={} bands={} epsilon={} delta_norm={}",
        variant.label(),
        trigger.n(),
        trigger.epsilon(),
        trigger.delta_norm()
    );
    Ok(())
}

fn cmd_poison(a: PoisonArgs) -> Result<()> {
    let config = read_config(&a.config)?;
    let (train_set, _) = prepare_data(&config)?;
    let indices = select_poison_indices(
        &train_set,
        config.poison.ratio,
        stage_seed(config.master_seed, "poison-select"),
    )?;
    let trigger = load_trigger(&a.trigger)?;
    let poisoned = poison_dataset(&train_set, &indices, &trigger, config.poison.target_label)?;
    save_idx(&poisoned, &a.images_out, &a.labels_out)?;
    if let Some(path) = &a.manifest_out {
        let rows: Vec<String> =
            indices.iter().map(|&i| format!("{i},{}", train_set.label(i))).collect();
        write_report(
            path,
            &[
                stamp_of(&config),
                format!(
                    "target_label={} ratio={}",
                    config.poison.target_label, config.poison.ratio
                ),
            ],
            "index,original_label",
            &rows,
        )?;
    }
    println!("poisoned={} of {}", indices.len(), train_set.len());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = read_config(&a.config)?;
    let variant: AttackVariant = a.variant.parse()?;
    let dataset = load_idx(&a.images, &a.labels)?;
    let descriptor = resolve_descriptor(&config, dataset.num_classes())?;
    let label = variant.label();
    let init = EvalClassifier::init(
        &descriptor,
        dataset.image_shape()?,
        stage_seed(config.master_seed, &format!("victim-{label}-init")),
    )?;
    let cfg = config
        .victim
        .to_config(10, stage_seed(config.master_seed, &format!("victim-{label}-train")));
    let model = freqdoor::classifier::train(&init, &dataset, &cfg)?;
    save_model(&model, &a.model_out)?;
    println!(
        "trained epochs={} params={} train_acc={}",
        cfg.epochs,
        model.param_count(),
        accuracy(&model, &dataset)?
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let config = read_config(&a.config)?;
    let model = load_model(&a.model)?;
    let dataset = load_idx(&a.images, &a.labels)?;
    let acc = accuracy(&model, &dataset)?;
    let asr = match &a.trigger {
        Some(path) => {
            let trigger = load_trigger(path)?;
            Some(attack_success_rate(
                &model,
                &dataset,
                &trigger,
                config.poison.target_label,
                &DefenseSpec::None,
            )?)
        }
        None => None,
    };
    match asr {
        Some(asr) => println!("clean_acc={acc} asr={asr}"),
        None => println!("clean_acc={acc}"),
    }
    if let Some(path) = &a.report_out {
        let row = match asr {
            Some(asr) => format!("{acc},{asr}"),
            None => format!("{acc},"),
        };
        write_report(path, &[stamp_of(&config)], "clean_acc,asr", &[row])?;
    }
    Ok(())
}

fn cmd_defend(a: DefendArgs) -> Result<()> {
    let config = read_config(&a.config)?;
    let spec = match a.defense.as_str() {
        "none" => DefenseSpec::None,
        "gaussian" => match a.sigma {
            Some(sigma) => DefenseSpec::Gaussian { window: a.window, sigma },
            None => DefenseSpec::gaussian(a.window),
        },
        "wiener" => DefenseSpec::Wiener { window: a.window },
        "jpeg" => DefenseSpec::Jpeg { quality: a.quality },
        other => {
            return Err(Error::Argument(format!(
                "defense '{other}' is not one of none, gaussian, wiener, jpeg"
            )));
        }
    };
    spec.validate()?;
    let model = load_model(&a.model)?;
    let dataset = load_idx(&a.images, &a.labels)?;
    let trigger = load_trigger(&a.trigger)?;
    let acc = defended_accuracy(&model, &dataset, &spec)?;
    let asr =
        attack_success_rate(&model, &dataset, &trigger, config.poison.target_label, &spec)?;
    let row = format!("cli,{},{},{acc},{asr}", spec.kind(), spec.param());
    println!("{row}");
    if let Some(path) = &a.report_out {
        write_report(
            path,
            &[stamp_of(&config)],
            "attack_variant,defense,param,acc,asr",
            &[row],
        )?;
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let config = read_config(&a.config)?;
    let amplification = a.amplification.unwrap_or(config.stealth.amplification);
    let set_a = load_idx(&a.images_a, &a.labels_a)?;
    let set_b = load_idx(&a.images_b, &a.labels_b)?;
    fs::create_dir_all(&a.out_dir)?;
    let stamp = stamp_of(&config);
    for (name, set) in [("a", &set_a), ("b", &set_b)] {
        let spectrum = average_log_spectrum(set.images())?;
        write_spectrum_csv(
            &spectrum,
            &a.out_dir.join(format!("spectrum_{name}.csv")),
            Some(&stamp),
        )?;
        save_pnm(&spectrum_image(&spectrum)?, &a.out_dir.join(format!("spectrum_{name}.pgm")))?;
    }
    let pairs = set_a.len().min(set_b.len());
    if pairs == 0 {
        return Err(Error::Argument("no image pairs to compare".into()));
    }
    let (map, first_l2) = disparity_map(set_a.image(0), set_b.image(0), amplification)?;
    save_pnm(&map, &a.out_dir.join("disparity.pgm"))?;
    let mut total = first_l2;
    for i in 1..pairs {
        total += disparity_map(set_a.image(i), set_b.image(i), amplification)?.1;
    }
    println!("pairs={pairs} mean_freq_l2={}", total / pairs as f64);
    Ok(())
}

fn cmd_strip(a: StripArgs) -> Result<()> {
    let config = read_config(&a.config)?;
    let model = load_model(&a.model)?;
    let dataset = load_idx(&a.images, &a.labels)?;
    let trigger = a.trigger.as_ref().map(|p| load_trigger(p)).transpose()?;
    let pool = dataset.images();
    let overlays = a.overlays.min(pool.len());
    let seed = stage_seed(config.master_seed, "strip");
    let samples = a.samples.min(dataset.len());
    let mut rows = Vec::with_capacity(samples);
    let mut sums = (0.0, 0.0);
    for i in 0..samples {
        let clean = strip_entropy(&model, dataset.image(i), pool, overlays, a.blend, seed)?;
        sums.0 += clean;
        let row = match &trigger {
            Some(t) => {
                let triggered = apply_frequency_trigger(dataset.image(i), t)?;
                let e = strip_entropy(&model, &triggered, pool, overlays, a.blend, seed)?;
                sums.1 += e;
                format!("{i},{clean},{e}")
            }
            None => format!("{i},{clean},"),
        };
        rows.push(row);
    }
    if let Some(path) = &a.report_out {
        write_report(
            path,
            &[stamp_of(&config), format!("overlays={overlays} blend={}", a.blend)],
            "sample_id,clean_entropy,triggered_entropy",
            &rows,
        )?;
    }
    print!("samples={samples} mean_clean_entropy={}", sums.0 / samples as f64);
    if trigger.is_some() {
        print!(" mean_triggered_entropy={}", sums.1 / samples as f64);
    }
    println!();
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let descriptor = match &a.descriptor {
        Some(text) => text.parse::<Descriptor>()?,
        None => Descriptor::small_cnn(10),
    };
    let model =
        EvalClassifier::init(&descriptor, (a.height, a.width, a.channels), a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x9e37_79b9_7f4a_7c15);
    let pixels: Vec<f64> =
        (0..a.height * a.width * a.channels).map(|_| rng.random::<f64>()).collect();
    let image = Image::new(a.height, a.width, a.channels, pixels)?;
    let err = gradient_check(&model, &image, a.label, a.per_layer, a.seed)?;
    println!("max_relative_error={err} tolerance={}", a.tolerance);
    if err > a.tolerance {
        return Err(Error::Consistency(format!(
            "gradient check failed: {err} above {}",
            a.tolerance
        )));
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let dataset = synth_dataset(a.count, a.seed)?;
    save_idx(&dataset, &a.images_out, &a.labels_out)?;
    println!("wrote {} samples", dataset.len());
    Ok(())
}
