use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cipher_vit::config::ExperimentConfig;
use cipher_vit::crypto::{
    decrypt_image, derive_permutation, encrypt_image, key_space_bits, EncryptionKey,
};
use cipher_vit::data::write_synthetic_dir;
use cipher_vit::gradcheck::{run_gradcheck, GradcheckSpec, DEFAULT_TOLERANCE};
use cipher_vit::image::{read_ppm, write_ppm};
use cipher_vit::lora::LoraConfig;
use cipher_vit::params::{format_report, param_report};
use cipher_vit::run::{run_eval, run_train, EvalRequest, TrainRequest};
use cipher_vit::train::TuningMode;
use cipher_vit::vit::ViTConfig;
use cipher_vit::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cipher-vit",
    version,
    about = "Fine-tune vision transformers on block-encrypted images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encrypt a PPM image block by block.
    Encrypt(CipherArgs),
    /// Invert `encrypt` with the same key and block size.
    Decrypt(CipherArgs),
    /// Write the permutation for a key, one index per line.
    DerivePerm {
        #[arg(long)]
        key: u64,
        #[arg(long)]
        patch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on a CIFAR-10 binary directory.
    Train {
        #[arg(long)]
        mode: TuningMode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        encrypt_key: Option<u64>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the small test architecture instead of ViT-B/16.
        #[arg(long)]
        toy: bool,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Test-split accuracy of a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encrypt_key: Option<u64>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Trainable-parameter counts per mode.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: TuningMode,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        report_paper_delta: bool,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Write a small CIFAR-10-format directory of synthetic images.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct CipherArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    key: u64,
    #[arg(long)]
    patch_size: usize,
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    path.map_or_else(
        || Ok(ExperimentConfig::default()),
        |p| ExperimentConfig::load(p),
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encrypt(a) => {
            let perm = derive_permutation(EncryptionKey(a.key), a.patch_size)?;
            write_ppm(&a.out, &encrypt_image(&read_ppm(&a.input)?, &perm)?)
        }
        Command::Decrypt(a) => {
            let perm = derive_permutation(EncryptionKey(a.key), a.patch_size)?;
            write_ppm(&a.out, &decrypt_image(&read_ppm(&a.input)?, &perm)?)
        }
        Command::DerivePerm {
            key,
            patch_size,
            out,
        } => {
            let perm = derive_permutation(EncryptionKey(key), patch_size)?;
            perm.write_text(&out)?;
            println!("length: {}", perm.len());
            println!("key_space_log2: {:.2}", key_space_bits(patch_size));
            println!("key_fingerprint: {}", EncryptionKey(key).fingerprint());
            Ok(())
        }
        Command::Train {
            mode,
            data,
            config,
            encrypt_key,
            limit,
            seed,
            toy,
            out,
        } => {
            let report = run_train(&TrainRequest {
                config: ExperimentConfig::load(&config)?,
                mode,
                data_dir: data,
                out_dir: out,
                toy,
                encrypt_key,
                seed,
                limit,
            })?;
            println!("{}", cipher_vit::train::CSV_HEADER);
            println!("{}", report.csv_row());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            encrypt_key,
            limit,
        } => {
            let outcome = run_eval(&EvalRequest {
                checkpoint_dir: checkpoint,
                data_dir: data,
                encrypt_key,
                limit,
            })?;
            println!("samples: {}", outcome.samples);
            println!("accuracy: {:.4}", outcome.accuracy);
            Ok(())
        }
        Command::CountParams {
            config,
            mode,
            rank,
            report_paper_delta,
        } => {
            let cfg = load_config(config.as_ref())?;
            let vit = cfg.vit.unwrap_or(ViTConfig::vit_b16(10));
            let lora = LoraConfig { rank, ..cfg.lora };
            print!(
                "{}",
                format_report(&param_report(&vit, &lora, mode)?, report_paper_delta)
            );
            Ok(())
        }
        Command::Gradcheck { config, tolerance } => {
            let cfg = load_config(config.as_ref())?;
            let vit = cfg.vit.unwrap_or(ViTConfig::toy(10));
            let mut spec = GradcheckSpec::new(vit, cfg.lora);
            spec.seed = cfg.train.seed;
            spec.tolerance = tolerance;
            let report = run_gradcheck(&spec)?;
            println!("probes: {}", report.probes.len());
            println!("max_rel_err: {:.3e}", report.max_rel_err);
            if let Some(w) = report.worst() {
                println!(
                    "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                    w.name, w.index, w.analytic, w.numeric
                );
            }
            if report.passed() {
                println!("PASS");
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "gradient check failed: {:.3e} > {:.1e}",
                    report.max_rel_err, tolerance
                )))
            }
        }
        Command::SynthData {
            out,
            train,
            test,
            seed,
        } => {
            write_synthetic_dir(&out, train, test, seed)?;
            println!(
                "wrote {train} train and {test} test records to {}",
                out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
