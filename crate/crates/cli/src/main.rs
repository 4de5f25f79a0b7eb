//! Command-line front end: synthesize recordings, run the pipeline, the
//! ablation grid and the GAN fairness comparison, and reformat outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fcdiag::pipeline::{
    ablation_matrix_with, fairness_report, fault_specs_to_csv, run_pipeline_with, synthetic_specs,
    write_atomic, AblationTable, EvalReport, RunConfig, Toggles,
};
use fcdiag::signal::{channel_path, synth_signal, Recording, WINDOW_LEN};

#[derive(Parser)]
#[command(
    name = "fcdiag",
    version,
    about = "Few-shot vibration fault diagnosis experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one synthetic recording per class plus a manifest.
    Synth(SynthArgs),
    /// Run a single pipeline and write its report.
    Run(ConfigArgs),
    /// Run the toggle grid over sample sizes and seeds.
    Ablate(ConfigArgs),
    /// Compare CCLR-GAN against the DCGAN baseline.
    Fairness(ConfigArgs),
    /// Rebuild summaries from earlier outputs.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Load recordings from a manifest instead of synthesizing them.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// CSV of fault specs for the synthetic source.
    #[arg(long)]
    spec_file: Option<PathBuf>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    gan_aug: Option<bool>,
    #[arg(long)]
    contrastive: Option<bool>,
    #[arg(long)]
    fourier: Option<bool>,
    #[arg(long)]
    gan_steps: Option<usize>,
    /// Classifier epochs, or `auto`.
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    per_class_generated: Option<usize>,
    /// Any config key, e.g. `--set gan.lambda1=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut overrides: Vec<(&str, String)> = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k, v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("seed", self.seed.map(|v| v.to_string()));
        put("output_dir", path(&self.output));
        put("data.sample_size", self.sample_size.map(|v| v.to_string()));
        put("data.test_size", self.test_size.map(|v| v.to_string()));
        put("data.manifest", path(&self.manifest));
        put("data.spec_file", path(&self.spec_file));
        put("data.noise_sigma", self.noise_sigma.map(|v| v.to_string()));
        put("stages.use_gan_aug", self.gan_aug.map(|v| v.to_string()));
        put(
            "stages.use_contrastive",
            self.contrastive.map(|v| v.to_string()),
        );
        put(
            "stages.use_fourier_conv",
            self.fourier.map(|v| v.to_string()),
        );
        put("gan.steps", self.gan_steps.map(|v| v.to_string()));
        put("classifier.epochs", self.epochs.clone());
        put(
            "gan.per_class_generated",
            self.per_class_generated.map(|v| v.to_string()),
        );
        for (k, v) in overrides {
            cfg.set(k, &v)?;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    /// Windows per class recording.
    #[arg(long, default_value_t = 220)]
    windows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    spec_file: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding predictions.csv.
    #[arg(long, conflicts_with = "ablation")]
    run: Option<PathBuf>,
    /// Ablation CSV to summarize.
    #[arg(long)]
    ablation: Option<PathBuf>,
    /// Where to write the rebuilt summary (default: alongside the input).
    #[arg(long)]
    output: Option<PathBuf>,
}

fn output_dir(cfg: &RunConfig, fallback: &str) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn synth(args: &SynthArgs) -> Result<()> {
    if args.windows == 0 {
        bail!("--windows must be positive");
    }
    let mut cfg = RunConfig::default();
    if let Some(s) = args.noise_sigma {
        cfg.data.noise_sigma = s;
    }
    cfg.data.spec_file = args.spec_file.clone();
    let specs = synthetic_specs(&cfg)?;
    fs::create_dir_all(&args.output)?;
    let mut manifest = String::from("# path,label,channel\n");
    for spec in &specs {
        let name = format!("class{}", spec.fault_class);
        let duration = (args.windows * WINDOW_LEN) as f64 / spec.sample_rate_hz;
        let signal = synth_signal(spec, duration, args.seed ^ (spec.fault_class as u64) << 40)?;
        let rec = Recording {
            sample_rate_hz: spec.sample_rate_hz.round() as u32,
            label: spec.fault_class as u32,
            samples: signal.into_data(),
        };
        rec.write(&channel_path(&args.output.join(&name), "DE"))?;
        manifest.push_str(&format!("{name},{},DE\n", spec.fault_class));
    }
    write_atomic(&args.output.join("manifest.txt"), &manifest)?;
    write_atomic(&args.output.join("specs.csv"), &fault_specs_to_csv(&specs))?;
    println!(
        "wrote {} recordings of {} windows to {}",
        specs.len(),
        args.windows,
        args.output.display()
    );
    Ok(())
}

fn run(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let dir = output_dir(&cfg, "fcdiag-run");
    let start = Instant::now();
    let art = run_pipeline_with(&cfg, None)?;
    art.write(&dir)?;
    print!("{}", art.report.summary());
    println!(
        "elapsed_s = {:.1}\noutput = {}",
        start.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

fn ablate(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let dir = output_dir(&cfg, "fcdiag-ablation");
    fs::create_dir_all(&dir)?;
    let table = ablation_matrix_with(&cfg, &Toggles::grid(), |c| {
        let t = c.toggles;
        match &c.outcome {
            Ok(a) => eprintln!(
                "gan={} con={} fourier={} size={} seed={} accuracy={a:.4}",
                t.use_gan_aug, t.use_contrastive, t.use_fourier_conv, c.sample_size, c.seed
            ),
            Err(e) => eprintln!(
                "gan={} con={} fourier={} size={} seed={} failed: {e}",
                t.use_gan_aug, t.use_contrastive, t.use_fourier_conv, c.sample_size, c.seed
            ),
        }
    })?;
    write_atomic(&dir.join("ablation.csv"), &table.to_csv())?;
    write_atomic(&dir.join("ablation_summary.csv"), &table.summary_csv())?;
    write_atomic(&dir.join("config.txt"), &cfg.to_text())?;
    print!("{}", table.summary_csv());
    Ok(())
}

fn fairness(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let dir = output_dir(&cfg, "fcdiag-fairness");
    let rep = fairness_report(&cfg)?;
    rep.write(&dir)?;
    rep.cclr.save(&dir.join("gan_cclr.dacw"))?;
    rep.dcgan.save(&dir.join("gan_dcgan.dacw"))?;
    print!("{}", rep.summary());
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn report(args: &ReportArgs) -> Result<()> {
    match (&args.run, &args.ablation) {
        (Some(run), None) => {
            let preds = EvalReport::parse_predictions(&read(&run.join("predictions.csv"))?)?;
            let classes = preds.iter().map(|&(t, p)| t.max(p) + 1).max().unwrap_or(1);
            let rep = EvalReport::from_predictions(preds, classes)?;
            let out = args.output.clone().unwrap_or_else(|| run.clone());
            fs::create_dir_all(&out)?;
            write_atomic(
                &out.join("confusion.csv"),
                &fcdiag::pipeline::report_confusion(&rep),
            )?;
            print!("{}", rep.summary());
        }
        (None, Some(csv)) => {
            let table = AblationTable::from_csv(&read(csv)?)?;
            let summary = table.summary_csv();
            let out = args
                .output
                .clone()
                .unwrap_or_else(|| csv.with_file_name("ablation_summary.csv"));
            write_atomic(&out, &summary)?;
            print!("{summary}");
        }
        _ => bail!("report needs exactly one of --run or --ablation"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate(a),
        Command::Fairness(a) => fairness(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
