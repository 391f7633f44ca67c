//! `dsurf` command-line front end.
//!
//! Deterministic payloads go to stdout or `--out`; wall-clock timings only
//! ever go to a separate `--timings` file.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::autograd::{gradcheck, GradcheckOp, GradcheckOptions, ImageSource};
use crate::bench::{run_bench, write_bench_csv};
use crate::config::{PartialConfig, RunConfig};
use crate::descriptor::{build_lut, build_luts, dense_descriptors_fast};
use crate::detector::{detector_response, extract_keypoints, write_keypoints_csv};
use crate::error::{Error, Result};
use crate::image::{load_image, GrayImage};
use crate::losses::{
    adv_loss, desc_loss, det_loss, disc_loss, finetune_objective, generator_objective, loss_grad,
    rec_loss, LossId, LossReport, ScoreMap, Wrt,
};
use crate::matching::{evaluate_pair, render_matches};
use crate::synth::random_image;
use crate::tensor::TensorFile;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dsurf", version, about = "Differentiable dense SURF features")]
struct Cli {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker thread cap.
    #[arg(long, global = true, env = "DSF_THREADS")]
    threads: Option<usize>,

    #[command(flatten)]
    overrides: ConfigFlags,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigFlags {
    /// Number of detector scales, from the front of the filter-size ladder.
    #[arg(long, global = true)]
    scales: Option<usize>,
    /// Comma-separated filter sizes.
    #[arg(long, global = true, value_delimiter = ',')]
    filter_sizes: Option<Vec<usize>>,
    #[arg(long, global = true)]
    detection_threshold: Option<f64>,
    #[arg(long, global = true)]
    ratio_threshold: Option<f64>,
    /// RANSAC inlier bound in pixels.
    #[arg(long, global = true)]
    ransac_threshold: Option<f64>,
    #[arg(long, global = true)]
    ransac_confidence: Option<f64>,
    #[arg(long, global = true)]
    ransac_max_iters: Option<usize>,
    #[arg(long = "seed", global = true)]
    rng_seed: Option<u64>,
    #[arg(long, global = true)]
    min_inliers: Option<usize>,
    #[arg(long, global = true)]
    lambda_rec: Option<f64>,
    #[arg(long, global = true)]
    lambda_det: Option<f64>,
    #[arg(long, global = true)]
    lambda_desc: Option<f64>,
    #[arg(long, global = true)]
    lambda_adv: Option<f64>,
}

impl ConfigFlags {
    fn to_partial(&self) -> PartialConfig {
        PartialConfig {
            scales: self.scales,
            filter_sizes: self.filter_sizes.clone(),
            detection_threshold: self.detection_threshold,
            ratio_threshold: self.ratio_threshold,
            ransac_threshold_px: self.ransac_threshold,
            ransac_confidence: self.ransac_confidence,
            ransac_max_iters: self.ransac_max_iters,
            rng_seed: self.rng_seed,
            min_inliers: self.min_inliers,
            lambda_rec: self.lambda_rec,
            lambda_det: self.lambda_det,
            lambda_desc: self.lambda_desc,
            lambda_adv: self.lambda_adv,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect blob keypoints; writes CSV.
    Detect {
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the (scales, H, W) determinant maps as a tensor.
        #[arg(long)]
        det_map: Option<PathBuf>,
    },
    /// Write one dense (64, H, W) descriptor tensor per scale.
    Describe {
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Detect, describe, match and verify an image pair; writes JSON.
    Match {
        image_a: PathBuf,
        image_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Side-by-side PNG with inliers in green and rejected matches in red.
        #[arg(long)]
        vis: Option<PathBuf>,
        #[arg(long)]
        timings: Option<PathBuf>,
    },
    /// Evaluate one loss; writes JSON.
    ///
    /// rec, det, desc, finetune: two images. gen: input, reconstructed and a
    /// fake score tensor. adv: a score tensor. disc: real and fake score
    /// tensors.
    Loss {
        #[arg(value_enum)]
        loss: LossId,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the gradient with respect to the first image as a tensor.
        #[arg(long)]
        grad: Option<PathBuf>,
    },
    /// Finite-difference validation of the analytic gradients; writes JSON.
    Gradcheck {
        #[arg(long, value_enum, default_value = "detector")]
        op: GradcheckOp,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Use a constant image instead of random ones.
        #[arg(long)]
        constant: Option<f64>,
        /// Losses only: compare each image against itself.
        #[arg(long)]
        identical_pair: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fast versus naive dense descriptor timings; writes CSV.
    Bench {
        /// Input image; a seeded random image is used when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides.to_partial())?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli.command, &config))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    emit(out, &bytes)
}

fn score_map(path: &Path) -> Result<ScoreMap> {
    let t = TensorFile::read(path)?;
    match *t.dims() {
        [h, w] => ScoreMap::new(h as usize, w as usize, t.into_data()),
        _ => Err(Error::MalformedTensor(format!(
            "{}: score map must be 2-D, got {:?}",
            path.display(),
            t.dims()
        ))),
    }
}

fn expect_inputs(loss: LossId, inputs: &[PathBuf], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::InvalidLoss(format!(
            "{loss:?} takes {n} input(s), got {}",
            inputs.len()
        )));
    }
    Ok(())
}

fn dispatch(command: Command, config: &RunConfig) -> Result<()> {
    let scales = config.scale_specs()?;
    match command {
        Command::Detect {
            image,
            out,
            det_map,
        } => {
            let img = load_image(&image)?;
            let pyr = detector_response(&img, &scales)?;
            let kps = extract_keypoints(&pyr, config.detection_threshold);
            let mut buf = Vec::new();
            write_keypoints_csv(&mut buf, &kps)?;
            emit(out.as_deref(), &buf)?;
            if let Some(path) = det_map {
                let (h, w) = pyr.shape();
                let data = (0..pyr.len())
                    .flat_map(|i| pyr.det(i).as_slice().to_vec())
                    .collect();
                TensorFile::new(
                    crate::tensor::DType::F64,
                    vec![pyr.len() as u32, h as u32, w as u32],
                    data,
                )?
                .write(path)?;
            }
        }
        Command::Describe { image, out_dir } => {
            let img = load_image(&image)?;
            fs::create_dir_all(&out_dir)?;
            for (i, spec) in scales.iter().enumerate() {
                let mut map = dense_descriptors_fast(&img, spec, &build_lut(spec));
                map.scale_index = i;
                let name = format!("desc_s{i}_L{}.dsf", spec.filter_size());
                TensorFile::from_descriptor_map(&map).write(out_dir.join(name))?;
            }
        }
        Command::Match {
            image_a,
            image_b,
            out,
            vis,
            timings,
        } => {
            let a = load_image(&image_a)?;
            let b = load_image(&image_b)?;
            let eval = evaluate_pair(&a, &b, &config.pair_config()?)?;
            emit_json(out.as_deref(), &eval.report)?;
            if let Some(p) = vis {
                render_matches(&a, &b, &eval).save(p)?;
            }
            if let Some(p) = timings {
                emit_json(Some(&p), &eval.timings)?;
            }
        }
        Command::Loss {
            loss,
            inputs,
            out,
            grad,
        } => {
            let weights = config.weights();
            let pair = |inputs: &[PathBuf]| -> Result<(GrayImage, GrayImage)> {
                expect_inputs(loss, inputs, 2)?;
                Ok((load_image(&inputs[0])?, load_image(&inputs[1])?))
            };
            let report = match loss {
                LossId::Rec | LossId::Det | LossId::Desc | LossId::Finetune => {
                    let (a, b) = pair(&inputs)?;
                    let luts = build_luts(&scales);
                    let report = match loss {
                        LossId::Rec => LossReport {
                            rec: Some(rec_loss(&a, &b)?),
                            ..Default::default()
                        },
                        LossId::Det => LossReport {
                            det: Some(det_loss(&a, &b, &scales)?),
                            ..Default::default()
                        },
                        LossId::Desc => LossReport {
                            desc: Some(desc_loss(&a, &b, &scales, &luts)?),
                            ..Default::default()
                        },
                        _ => finetune_objective(&a, &b, &weights, &scales, &luts)?,
                    };
                    if let Some(p) = &grad {
                        let g = loss_grad(loss, &a, &b, Wrt::First, &weights, &scales, &luts)?;
                        TensorFile::from_image(&g).write(p)?;
                    }
                    report
                }
                LossId::Gen => {
                    expect_inputs(loss, &inputs, 3)?;
                    let a = load_image(&inputs[0])?;
                    let b = load_image(&inputs[1])?;
                    let fake = score_map(&inputs[2])?;
                    let luts = build_luts(&scales);
                    if let Some(p) = &grad {
                        let g = loss_grad(loss, &a, &b, Wrt::First, &weights, &scales, &luts)?;
                        TensorFile::from_image(&g).write(p)?;
                    }
                    generator_objective(&a, &b, &fake, &weights, &scales, &luts)?
                }
                LossId::Adv | LossId::Disc if grad.is_some() => {
                    return Err(Error::InvalidLoss(
                        "score-map losses have no image gradient".into(),
                    ));
                }
                LossId::Adv => {
                    expect_inputs(loss, &inputs, 1)?;
                    LossReport {
                        adv: Some(adv_loss(&score_map(&inputs[0])?)),
                        ..Default::default()
                    }
                }
                LossId::Disc => {
                    expect_inputs(loss, &inputs, 2)?;
                    LossReport {
                        disc: Some(disc_loss(&score_map(&inputs[0])?, &score_map(&inputs[1])?)?),
                        ..Default::default()
                    }
                }
            };
            emit_json(out.as_deref(), &report)?;
        }
        Command::Gradcheck {
            op,
            trials,
            constant,
            identical_pair,
            out,
        } => {
            let mut opts = GradcheckOptions::new(op, trials, config.rng_seed);
            if let Some(c) = constant {
                opts.source = ImageSource::Constant(c);
            }
            opts.identical_pair = identical_pair;
            let report = gradcheck(&opts)?;
            emit_json(out.as_deref(), &report)?;
        }
        Command::Bench {
            image,
            size,
            repeats,
            out,
        } => {
            let img = match image {
                Some(p) => load_image(&p)?,
                None => {
                    if size == 0 {
                        return Err(Error::EmptyImage {
                            height: 0,
                            width: 0,
                        });
                    }
                    random_image(size, size, config.rng_seed)
                }
            };
            let rows = run_bench(&img, &scales, repeats);
            let mut buf = Vec::new();
            write_bench_csv(&mut buf, &rows)?;
            emit(out.as_deref(), &buf)?;
        }
    }
    Ok(())
}
