//! Command-line pipeline: stats, selftest, train, eval-nll, inpaint,
//! sample, visualize-parts, corrupt.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure (including a failing selftest).
//!
//! One master seed fans out to fixed purpose streams (init, shuffle,
//! corruption, sampling); sampling commands use one substream per output
//! image, so sample `i` does not depend on how many images precede it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use num_bigint::BigUint;
use rayon::iter::{IntoParallelIterator, ParallelIterator};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{join_extent, load_config, parse_extent, RunConfig};
use crate::data::{
    corrupt, load_idx_images, mse_missing, quantize, states_to_intensities, tile_images,
    write_pgm_file, CorruptionMask, QuantizedSet,
};
use crate::error::{Error, Result};
use crate::inference::{log_likelihood_of, ObservationGrid};
use crate::learning::{sga_fit_with, weights_from_scores, Parameters, Weights};
use crate::oracle::run_selftest;
use crate::sampling::{inpaint, sample_conditional, state_to_intensity, visualize_state};
use crate::seed::{stream_rng, substream_rng, STREAM_CORRUPT, STREAM_SAMPLE};
use crate::topology::ModelTopology;

#[derive(Parser)]
#[command(
    name = "dlt",
    version,
    about = "Dense latent tree image models: exact inference, training, in-painting"
)]
struct Cli {
    /// Worker threads for training and evaluation; 0 = all cores.
    /// Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Report layer shapes, unique-position and node counts, parameters.
    Stats {
        /// key=value config file; omit for the reference 28x28 model
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check the implementation against brute-force references.
    Selftest,
    /// Fit a model with stochastic gradient ascent and checkpoint it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// IDX image file
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the NLL trace
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean negative log-likelihood of a dataset under a checkpoint.
    EvalNll {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write per-image NLLs to this CSV file
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Evaluate only the first N images
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Hide a random patch per image, fill it by conditional sampling,
    /// and report the squared error on the hidden pixels.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Master seed for patch placement and sampling
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Patch as HxW
        #[arg(long, default_value = "12x12")]
        patch: String,
        /// Process only the first N images
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Draw unconditional samples from the model prior.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of samples
        #[arg(short = 'n', long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render what the states of one hidden layer look like.
    VisualizeParts {
        #[arg(long)]
        ckpt: PathBuf,
        /// 1-based layer as printed by stats; 2..=L
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Render at most this many states
        #[arg(long, default_value_t = 64)]
        states: usize,
    },
    /// Write corrupted copies of a dataset plus the patch positions.
    Corrupt {
        #[arg(long)]
        data: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Patch as HxW
        #[arg(long, default_value = "12x12")]
        patch: String,
        /// Quantization levels used to render the observed pixels
        #[arg(long, default_value_t = 2)]
        levels: usize,
        /// Process only the first N images
        #[arg(long)]
        limit: Option<usize>,
    },
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if cli.threads > 0 {
        // a second call in the same process keeps the first pool; fine
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .ok();
    }
    let outcome = match cli.cmd {
        Cmd::Stats { config } => cmd_stats(config),
        Cmd::Selftest => cmd_selftest(),
        Cmd::Train { config, data, out } => cmd_train(config, data, out),
        Cmd::EvalNll {
            ckpt,
            data,
            csv,
            limit,
        } => cmd_eval_nll(ckpt, data, csv, limit),
        Cmd::Inpaint {
            ckpt,
            data,
            out_dir,
            seed,
            patch,
            limit,
        } => cmd_inpaint(ckpt, data, out_dir, seed, &patch, limit),
        Cmd::Sample {
            ckpt,
            count,
            seed,
            out_dir,
        } => cmd_sample(ckpt, count, seed, out_dir),
        Cmd::VisualizeParts {
            ckpt,
            layer,
            out_dir,
            seed,
            states,
        } => cmd_visualize_parts(ckpt, layer, out_dir, seed, states),
        Cmd::Corrupt {
            data,
            out,
            seed,
            patch,
            levels,
            limit,
        } => cmd_corrupt(data, out, seed, &patch, levels, limit),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn load_or_default_config(path: Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default_mnist()),
    }
}

fn cmd_stats(config: Option<PathBuf>) -> Result<i32> {
    let cfg = load_or_default_config(config)?;
    let topo = cfg.topology()?;
    println!("layers = {}", topo.num_layers());
    for l in 0..topo.num_layers() {
        let shape = topo.layer(l);
        let nodes: BigUint = topo.duplicates(l).iter().sum();
        println!(
            "layer {}: extent {}, states {}, positions {}, nodes {}",
            l + 1,
            join_extent(&shape.extent),
            shape.states,
            shape.positions(),
            nodes
        );
    }
    println!("T = {}", topo.total_positions());
    println!("D = {}", topo.total_nodes());
    println!("params = {}", topo.count_parameters());
    Ok(0)
}

fn cmd_selftest() -> Result<i32> {
    let reports = run_selftest();
    let mut all_passed = true;
    for r in &reports {
        let tag = if r.passed { "ok  " } else { "FAIL" };
        println!("{} {}: {}", tag, r.name, r.detail);
        all_passed &= r.passed;
    }
    if all_passed {
        println!("selftest passed ({} checks)", reports.len());
        Ok(0)
    } else {
        eprintln!("selftest failed");
        Ok(3)
    }
}

fn load_quantized(data: &Path, levels: usize, limit: Option<usize>) -> Result<QuantizedSet> {
    let images = load_idx_images(data)?;
    let q = quantize(&images, levels)?;
    Ok(match limit {
        Some(n) => q.take(n),
        None => q,
    })
}

fn cmd_train(config: Option<PathBuf>, data: PathBuf, out: PathBuf) -> Result<i32> {
    let cfg = load_or_default_config(config)?;
    let topo = cfg.topology()?;
    let q = load_quantized(&data, cfg.levels, None)?;
    let observations: Vec<ObservationGrid> = if cfg.corrupt_train {
        let mut rng = stream_rng(cfg.effective_corrupt_seed(), STREAM_CORRUPT);
        corrupt(&q, cfg.patch, &mut rng)?.0
    } else {
        (0..q.count).map(|i| q.observation(i)).collect()
    };
    println!(
        "training on {} images ({} observed pixels each{})",
        q.count,
        observations
            .first()
            .map(|o| o.observed_count())
            .unwrap_or(0),
        if cfg.corrupt_train {
            format!(", {}x{} patch hidden", cfg.patch.0, cfg.patch.1)
        } else {
            String::new()
        }
    );

    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("run_config.txt"), cfg.to_canonical_string())?;

    let mut params = Parameters::random_init(&topo, cfg.train.seed);
    let mut trace_csv = String::from("epoch,mean_nll\n");
    let every = cfg.checkpoint_every;
    let epochs = cfg.train.epochs;
    sga_fit_with(&mut params, &topo, &observations, &cfg.train, |p, stats| {
        println!(
            "epoch {}/{}: mean_nll {:.6} ({:.1} s)",
            stats.epoch, epochs, stats.mean_nll, stats.wall_seconds
        );
        trace_csv.push_str(&format!("{},{}\n", stats.epoch, stats.mean_nll));
        if every > 0 && stats.epoch % every == 0 && stats.epoch != epochs {
            save_checkpoint(out.join(format!("ckpt_epoch_{:04}.dlt", stats.epoch)), &topo, p)?;
        }
        Ok(())
    })?;
    std::fs::write(out.join("nll_trace.csv"), trace_csv)?;
    save_checkpoint(out.join("model.dlt"), &topo, &params)?;
    println!("saved {}", out.join("model.dlt").display());
    Ok(0)
}

fn load_model(ckpt: &Path) -> Result<(ModelTopology, Parameters, Weights)> {
    let (topo, params) = load_checkpoint(ckpt)?;
    let weights = weights_from_scores(&params, &topo)?;
    Ok((topo, params, weights))
}

fn cmd_eval_nll(
    ckpt: PathBuf,
    data: PathBuf,
    csv: Option<PathBuf>,
    limit: Option<usize>,
) -> Result<i32> {
    let (topo, _params, weights) = load_model(&ckpt)?;
    let q = load_quantized(&data, topo.layer(0).states, limit)?;
    if q.count == 0 {
        return Err(Error::EmptyDataset);
    }
    let nlls: Vec<f64> = (0..q.count)
        .into_par_iter()
        .map(|i| log_likelihood_of(&weights, &topo, &q.observation(i)).map(|ll| -ll))
        .collect::<Result<_>>()?;
    // sequential sum keeps the mean independent of thread count
    let mean = nlls.iter().sum::<f64>() / q.count as f64;
    if let Some(path) = csv {
        let mut text = String::from("image_index,nll\n");
        for (i, nll) in nlls.iter().enumerate() {
            text.push_str(&format!("{},{}\n", i, nll));
        }
        std::fs::write(path, text)?;
    }
    println!("images = {}", q.count);
    println!("mean_nll = {:.6}", mean);
    Ok(0)
}

fn parse_patch(s: &str) -> Result<(usize, usize)> {
    let dims = parse_extent("patch", s)?;
    Ok(match dims.as_slice() {
        [side] => (*side, *side),
        [h, w] => (*h, *w),
        _ => unreachable!("parse_extent returns 1 or 2 dims"),
    })
}

fn pgm_shape(extent: &[usize]) -> (usize, usize) {
    match extent {
        [n] => (1, *n),
        [h, w] => (*h, *w),
        _ => unreachable!("models are 1-D or 2-D"),
    }
}

fn cmd_inpaint(
    ckpt: PathBuf,
    data: PathBuf,
    out_dir: PathBuf,
    seed: u64,
    patch: &str,
    limit: Option<usize>,
) -> Result<i32> {
    let (topo, _params, weights) = load_model(&ckpt)?;
    if topo.ndim() != 2 {
        return Err(Error::Config("in-painting needs a 2-D model".into()));
    }
    let patch = parse_patch(patch)?;
    let truth = load_quantized(&data, topo.layer(0).states, limit)?;
    if truth.count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = stream_rng(seed, STREAM_CORRUPT);
    let (observations, masks) = corrupt(&truth, patch, &mut rng)?;

    let completed: Vec<Vec<u16>> = (0..truth.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream_rng(seed, STREAM_SAMPLE, i as u64);
            inpaint(&weights, &topo, &observations[i], &mut rng).map(|inp| inp.states)
        })
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(&out_dir)?;
    let (h, w) = (truth.height, truth.width);
    let mut csv = String::from("image_index,patch_row,patch_col,mse\n");
    for i in 0..truth.count {
        let bytes = states_to_intensities(&completed[i], truth.levels);
        write_pgm_file(out_dir.join(format!("inpaint_{:04}.pgm", i)), h, w, &bytes)?;
        let per_image = per_image_mse(&truth, i, &completed[i], &masks[i]);
        csv.push_str(&format!(
            "{},{},{},{}\n",
            i, masks[i].top, masks[i].left, per_image
        ));
    }
    std::fs::write(out_dir.join("inpaint_metrics.csv"), csv)?;
    let pooled = mse_missing(&truth, &completed, &masks)?;
    println!("images = {}", truth.count);
    println!("mse_missing = {:.6}", pooled);
    Ok(0)
}

fn per_image_mse(truth: &QuantizedSet, i: usize, completed: &[u16], mask: &CorruptionMask) -> f64 {
    let scale = (truth.levels - 1) as f64;
    let t = truth.states(i);
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in mask.top..mask.top + mask.height {
        for c in mask.left..mask.left + mask.width {
            let idx = r * truth.width + c;
            let d = (t[idx] as f64 - completed[idx] as f64) / scale;
            sum += d * d;
            n += 1;
        }
    }
    sum / n as f64
}

fn cmd_sample(ckpt: PathBuf, count: usize, seed: u64, out_dir: PathBuf) -> Result<i32> {
    let (topo, _params, weights) = load_model(&ckpt)?;
    std::fs::create_dir_all(&out_dir)?;
    let extent = topo.layer(0).extent.clone();
    let levels = topo.layer(0).states;
    let (h, w) = pgm_shape(&extent);
    for i in 0..count {
        let mut rng = substream_rng(seed, STREAM_SAMPLE, i as u64);
        let obs = ObservationGrid::all_missing(extent.clone());
        let grid = sample_conditional(&weights, &topo, &obs, &mut rng)?;
        let bytes: Vec<u8> = grid
            .layer(0)
            .iter()
            .map(|&s| state_to_intensity(s, levels))
            .collect();
        write_pgm_file(out_dir.join(format!("sample_{:04}.pgm", i)), h, w, &bytes)?;
    }
    println!("wrote {} samples to {}", count, out_dir.display());
    Ok(0)
}

fn cmd_visualize_parts(
    ckpt: PathBuf,
    layer: usize,
    out_dir: PathBuf,
    seed: u64,
    states: usize,
) -> Result<i32> {
    let (topo, _params, weights) = load_model(&ckpt)?;
    if layer < 2 || layer > topo.num_layers() {
        return Err(Error::InvalidLayerOrState(format!(
            "--layer {} out of range 2..={}",
            layer,
            topo.num_layers()
        )));
    }
    let available = topo.layer(layer - 1).states;
    let n = states.min(available);
    if n == 0 {
        return Err(Error::InvalidLayerOrState("--states must be >= 1".into()));
    }
    std::fs::create_dir_all(&out_dir)?;
    let mut tiles = Vec::with_capacity(n);
    let mut shape = (0usize, 0usize);
    for f in 0..n {
        let mut rng = substream_rng(seed, STREAM_SAMPLE, f as u64);
        let (extent, bytes) = visualize_state(&weights, &topo, layer, f, &mut rng)?;
        shape = pgm_shape(&extent);
        write_pgm_file(
            out_dir.join(format!("part_l{}_s{:04}.pgm", layer, f)),
            shape.0,
            shape.1,
            &bytes,
        )?;
        tiles.push(bytes);
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let (sh, sw, sheet) = tile_images(shape.0, shape.1, &tiles, cols);
    let sheet_path = out_dir.join(format!("parts_l{}.pgm", layer));
    write_pgm_file(&sheet_path, sh, sw, &sheet)?;
    println!(
        "wrote {} of {} states for layer {} to {}",
        n,
        available,
        layer,
        out_dir.display()
    );
    Ok(0)
}

fn cmd_corrupt(
    data: PathBuf,
    out: PathBuf,
    seed: u64,
    patch: &str,
    levels: usize,
    limit: Option<usize>,
) -> Result<i32> {
    let patch = parse_patch(patch)?;
    let q = load_quantized(&data, levels, limit)?;
    if q.count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = stream_rng(seed, STREAM_CORRUPT);
    let (observations, masks) = corrupt(&q, patch, &mut rng)?;
    std::fs::create_dir_all(&out)?;
    let mut csv = String::from("image_index,patch_row,patch_col,patch_h,patch_w\n");
    for (i, (obs, mask)) in observations.iter().zip(masks.iter()).enumerate() {
        // missing pixels render as mid-gray
        let bytes: Vec<u8> = (0..q.height * q.width)
            .map(|t| match obs.get(t) {
                Some(s) => state_to_intensity(s, levels),
                None => 128,
            })
            .collect();
        write_pgm_file(
            out.join(format!("corrupt_{:04}.pgm", i)),
            q.height,
            q.width,
            &bytes,
        )?;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            i, mask.top, mask.left, mask.height, mask.width
        ));
    }
    std::fs::write(out.join("masks.csv"), csv)?;
    println!("corrupted {} images into {}", q.count, out.display());
    Ok(0)
}
