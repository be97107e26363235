//! Command-line surface: `synth`, `segment`, `train`, `eval`, `embed`.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use grabdae::data::{
    decode_ppm, encode_pgm_mask, encode_ppm, load_dataset, parse_synth_spec, parse_train_config,
    synth_generate, Domain, DomainDataset, SynthSpec,
};
use grabdae::grabmask::{apply_mask_blur, grabcut_segment, GrabMaskParams, Rect};
use grabdae::rng::stream;
use grabdae::train::{evaluate, export_embeddings, load_images, load_models, train};

#[derive(Parser)]
#[command(name = "grabdae", version, about = "Masked domain adaptation pipeline")]
struct Cli {
    /// Overrides the seed from configs (and seeds seedless commands).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain shape benchmark.
    Synth {
        /// Output directory; receives source/ and target/ trees.
        #[arg(long)]
        out: PathBuf,
        /// Optional generator config (flat JSON).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Segment one PPM image and write its foreground mask.
    Segment {
        #[arg(long)]
        input: PathBuf,
        /// Mask output (binary PGM, 255 = foreground).
        #[arg(long = "out-mask")]
        out_mask: PathBuf,
        /// Also write the background-blurred composite here.
        #[arg(long = "apply-blur")]
        apply_blur: Option<PathBuf>,
        #[arg(long, default_value_t = 50.0)]
        gamma: f64,
        #[arg(long, default_value_t = 5)]
        components: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long = "seed-frac", default_value_t = 0.6)]
        seed_frac: f64,
    },
    /// Train on a labeled source tree and an unlabeled target tree.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Run directory for metrics.csv, the mask cache and the checkpoint.
        #[arg(long)]
        run: PathBuf,
    },
    /// Evaluate a checkpoint on a labeled tree and write a per-class report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Export extractor features as TSV (domain tag, label, features).
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Domain tag written in the first column.
        #[arg(long, default_value = "target")]
        domain: String,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("building the thread pool")?;
    }

    match cli.command {
        Command::Synth { out, config } => {
            let mut spec = match config {
                Some(path) => parse_synth_spec(&path)
                    .with_context(|| format!("reading {}", path.display()))?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let summary = synth_generate(&spec, &out)?;
            println!(
                "wrote {} images and {} masks under {}",
                summary.images_written,
                summary.masks_written,
                out.display()
            );
        }
        Command::Segment { input, out_mask, apply_blur, gamma, components, iters, seed_frac } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let img = decode_ppm(&bytes)?;
            let params = GrabMaskParams {
                gamma,
                components,
                outer_iters: iters,
                seed_frac,
                ..GrabMaskParams::default()
            };
            params.validate()?;
            let mut rng = stream(cli.seed.unwrap_or(0), "segment-cli", 0);
            let rect = Rect::centered_fraction(img.width, img.height, params.seed_frac);
            let result = grabcut_segment(&img, &rect, &params, &mut rng)?;
            fs::write(&out_mask, encode_pgm_mask(&result.mask))
                .with_context(|| format!("writing {}", out_mask.display()))?;
            if let Some(blur_path) = apply_blur {
                let sigma = params.blur_sigma_for(img.width.max(img.height));
                let masked = apply_mask_blur(&img, &result.mask, sigma)?;
                fs::write(&blur_path, encode_ppm(&masked))
                    .with_context(|| format!("writing {}", blur_path.display()))?;
            }
            println!(
                "mask: {} foreground pixels of {}{}",
                result.mask.fg_count(),
                img.width * img.height,
                if result.fallback { " (degenerate input: seed-interior fallback)" } else { "" }
            );
        }
        Command::Train { config, source, target, run } => {
            let mut cfg = parse_train_config(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let source_ds = load_dataset(&source, true, Domain::Source)?;
            report_skipped(&source_ds);
            // Target labels are optional; when the tree has matching class
            // directories they feed the per-epoch accuracy column only.
            let target_ds = match load_dataset(&target, true, Domain::Target) {
                Ok(ds) if ds.class_names == source_ds.class_names => ds,
                _ => load_dataset(&target, false, Domain::Target)?,
            };
            report_skipped(&target_ds);
            let outcome = train(&cfg, &source_ds, &target_ds, &run)?;
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            if let Some(report) = outcome.final_eval {
                println!("final target accuracy: {:.2}%", report.average_accuracy);
            }
        }
        Command::Eval { checkpoint, data, report } => {
            let (student, _teacher, class_names) = load_models(&checkpoint)?;
            let ds = load_dataset(&data, true, Domain::Target)?;
            if ds.class_names != class_names {
                bail!(
                    "dataset classes {:?} do not match checkpoint classes {:?}",
                    ds.class_names,
                    class_names
                );
            }
            let images = load_images(&ds)?;
            let result = evaluate(&student, &images)?;
            let mut csv = String::from("class,samples,accuracy\n");
            for (i, name) in result.class_names.iter().enumerate() {
                csv.push_str(&format!(
                    "{name},{},{:.4}\n",
                    result.per_class_counts[i], result.per_class_accuracy[i]
                ));
            }
            let total: usize = result.per_class_counts.iter().sum();
            csv.push_str(&format!("average,{total},{:.4}\n", result.average_accuracy));
            fs::write(&report, csv).with_context(|| format!("writing {}", report.display()))?;
            println!("average accuracy: {:.2}%", result.average_accuracy);
        }
        Command::Embed { checkpoint, data, out, domain } => {
            let (student, _teacher, _) = load_models(&checkpoint)?;
            let ds = match load_dataset(&data, true, Domain::Target) {
                Ok(ds) => ds,
                Err(_) => load_dataset(&data, false, Domain::Target)?,
            };
            let images = load_images(&ds)?;
            export_embeddings(&student, &images, &domain, &out)?;
            println!("wrote {} rows to {}", images.len(), out.display());
        }
    }
    Ok(())
}

fn report_skipped(ds: &DomainDataset) {
    for (path, reason) in &ds.skipped {
        eprintln!("skipped unreadable {}: {reason}", path.display());
    }
}
