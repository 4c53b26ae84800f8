//! Command-line surface: dataset generation, pretraining, the transfer
//! probe, verification, the CVA cost benchmark, and reconstruction dumps.
//!
//! Exit codes: 0 success, 1 verification failure, 2 numeric abort, 3 usage
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use geomim_core::checkpoint::load_checkpoint;
use geomim_core::config::RunConfig;
use geomim_core::dataset::{generate_dataset, load_manifest, load_sample};
use geomim_core::error::Error as CoreError;
use geomim_core::masking::{fill_mask, sample_mask};
use geomim_core::model::{
    block_forward, cva_flops, cva_forward, decode, encode, global_attention_flops, to_nchw,
    ModelParams,
};
use geomim_core::probe::{probe_comparison, ProbeConfig};
use geomim_core::rng::mix;
use geomim_core::tensor::{save_tensor, Tape, Tensor};
use geomim_core::trainer::{prepare_sample, run_pretrain, TrainContext};
use geomim_core::verify::run_verification;

#[derive(Parser)]
#[command(
    name = "geomim",
    version,
    about = "Masked multi-view pretraining against BEV feature targets"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Sectioned key/value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set trainer.steps=500 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.sets {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-view dataset with oracle teacher grids.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        /// Dataset seed; falls back to GEOMIM_SEED, then the config value.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of ring cameras.
        #[arg(long)]
        views: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pretrain on a generated dataset; writes metrics.jsonl and checkpoints.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Total optimizer steps (overrides trainer.steps).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finetune the pretrained encoder and a random-init control on BEV
    /// occupancy and compare.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of probe seeds per arm.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the full invariant suite and print a pass/fail table.
    Verify,
    /// Counted FLOPs and wall time: row-grouped attention vs global.
    BenchCva {
        /// Comma-separated token-row counts.
        #[arg(long, default_value = "4,8,16")]
        rows: String,
        #[arg(long, default_value_t = 6)]
        views: usize,
        #[arg(long, default_value_t = 7)]
        cols: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one sample through a checkpoint and dump tensors plus PNGs.
    DumpRecon {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A sample directory inside a generated dataset.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mask seed for the reconstruction; falls back to GEOMIM_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn env_seed() -> Option<u64> {
    std::env::var("GEOMIM_SEED").ok().and_then(|s| s.parse().ok())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(3),
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<CoreError>() {
                Some(CoreError::TrainAbort { .. }) => 2,
                Some(CoreError::Config(_)) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData {
            out,
            scenes,
            seed,
            views,
            config,
        } => {
            let mut run = config.resolve()?;
            if let Some(s) = seed.or_else(env_seed) {
                run.data_seed = s;
            }
            if let Some(v) = views {
                run.data_views = v;
            }
            run.data_scenes = scenes;
            let spec = run.dataset_spec()?;
            let manifest = generate_dataset(&out, scenes, &spec)
                .with_context(|| format!("writing dataset to {}", out.display()))?;
            println!(
                "wrote {} samples to {} (seed {}, {} views)",
                manifest.samples.len(),
                out.display(),
                spec.seed,
                spec.views
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Pretrain {
            data,
            out,
            steps,
            seed,
            config,
        } => {
            let mut run = config.resolve()?;
            if let Some(s) = steps {
                run.train_steps = s;
            }
            if let Some(s) = seed.or_else(env_seed) {
                run.train_seed = s;
            }
            match run_pretrain(&data, &out, &run) {
                Ok(summary) => {
                    if let Some(last) = summary.metrics.last() {
                        println!(
                            "finished {} steps: total {:.6}, rec {:.6}, depth {:.6}",
                            summary.metrics.len(),
                            last.total,
                            last.rec,
                            last.depth
                        );
                    }
                    println!("checkpoint: {}", summary.final_checkpoint.display());
                    Ok(ExitCode::SUCCESS)
                }
                Err(CoreError::TrainAbort { step, diagnostics }) => {
                    std::fs::create_dir_all(&out).ok();
                    std::fs::write(
                        out.join("abort.json"),
                        serde_json::json!({ "step": step, "diagnostics": diagnostics })
                            .to_string(),
                    )
                    .ok();
                    Err(CoreError::TrainAbort { step, diagnostics }.into())
                }
                Err(e) => Err(e.into()),
            }
        }
        Cmd::Probe {
            checkpoint,
            out,
            seeds,
            seed,
            config,
        } => {
            let mut run = config.resolve()?;
            if let Some(s) = seed.or_else(env_seed) {
                run.probe_seed = s;
            }
            let model_cfg = run.model_config();
            let (model, meta, _) = load_checkpoint(&checkpoint, &model_cfg)?;
            println!(
                "loaded checkpoint at step {} (config hash {})",
                meta.step, meta.config_hash
            );
            let spec = run.dataset_spec()?;
            let probe_cfg = ProbeConfig::from_run(&run);
            let seed_list: Vec<u64> = (0..seeds).collect();
            let results = probe_comparison(&model, &spec, &probe_cfg, &seed_list)?;
            std::fs::create_dir_all(&out)?;
            let mut wins = 0;
            let mut rows = Vec::new();
            println!("seed  pretrained(loss/iou)   random-init(loss/iou)");
            for (i, (pre, ctl)) in results.iter().enumerate() {
                if pre.eval_loss < ctl.eval_loss {
                    wins += 1;
                }
                println!(
                    "{:>4}  {:.6} / {:.4}    {:.6} / {:.4}",
                    i, pre.eval_loss, pre.iou, ctl.eval_loss, ctl.iou
                );
                rows.push(serde_json::json!({
                    "seed": i,
                    "pretrained": { "eval_loss": pre.eval_loss, "iou": pre.iou },
                    "random_init": { "eval_loss": ctl.eval_loss, "iou": ctl.iou },
                }));
            }
            println!("pretrained wins {wins}/{} seeds", results.len());
            std::fs::write(
                out.join("probe_metrics.json"),
                serde_json::to_string_pretty(&rows)?,
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Verify => {
            let report = run_verification(true)?;
            print!("{}", report.render());
            if report.all_passed() {
                println!("all checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("verification FAILED");
                Ok(ExitCode::from(1))
            }
        }
        Cmd::BenchCva {
            rows,
            views,
            cols,
            dim,
            out,
        } => {
            let row_list: Vec<usize> = rows
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| CoreError::Config(format!("--rows {rows:?}: expected integers")))?;
            let csv = bench_cva(&row_list, views, cols, dim)?;
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, &csv)?;
                eprintln!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::DumpRecon {
            checkpoint,
            sample,
            out,
            seed,
            config,
        } => {
            let mask_seed = seed.or_else(env_seed).unwrap_or(0);
            dump_recon(&checkpoint, &sample, &out, mask_seed, &config)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Wall time of a closure, median over `reps` after one warmup.
fn time_median(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

fn bench_cva(rows: &[usize], views: usize, cols: usize, dim: usize) -> anyhow::Result<String> {
    use geomim_core::model::ModelConfig;
    let cfg = ModelConfig {
        dim,
        heads: 4,
        enc_depth: 0,
        dec_depth: 2,
        patch: 16,
        bins: 4,
        mlp_ratio: 4,
        views,
        cva_positions: vec![1],
        camera_gate: false,
    };
    cfg.validate()?;
    let params = ModelParams::init(&cfg, 0)?;
    let mut csv = String::from("rows,tokens,cva_flops,global_flops,cva_wall_ms,global_wall_ms\n");
    for &h in rows {
        let tokens = views * h * cols;
        let mut rng = geomim_core::rng::Rng::new(h as u64);
        let grouped_input = Tensor::rand_uniform(&mut rng, &[views, h * cols, dim], -1.0, 1.0);
        let global_input = Tensor::rand_uniform(&mut rng, &[1, tokens, dim], -1.0, 1.0);

        let cva_ms = time_median(5, || {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.leaf(&grouped_input);
            let y = cva_forward(&mut tape, x, &bound, "dec.shared.0", h, cols).unwrap();
            std::hint::black_box(tape.value(y).data()[0]);
        });
        let global_ms = time_median(5, || {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.leaf(&global_input);
            let y = block_forward(&mut tape, x, &bound, "dec.shared.0").unwrap();
            std::hint::black_box(tape.value(y).data()[0]);
        });
        csv.push_str(&format!(
            "{h},{tokens},{},{},{cva_ms:.3},{global_ms:.3}\n",
            cva_flops(h, cols, views, dim),
            global_attention_flops(h, cols, views, dim),
        ));
    }
    Ok(csv)
}

fn min_max_png(path: &Path, data: &[f64], width: usize, height: usize) -> anyhow::Result<()> {
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = data
        .iter()
        .map(|&v| (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| anyhow!("PNG buffer size mismatch"))?;
    img.save(path)?;
    Ok(())
}

fn dump_recon(
    checkpoint: &Path,
    sample_dir: &Path,
    out: &Path,
    mask_seed: u64,
    config: &ConfigArgs,
) -> anyhow::Result<()> {
    let dataset_dir = sample_dir
        .parent()
        .ok_or_else(|| anyhow!("--sample must point at a dataset sample directory"))?;
    let sample_name = sample_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| anyhow!("--sample has no directory name"))?;
    let manifest = load_manifest(dataset_dir)
        .with_context(|| format!("loading manifest next to {}", sample_dir.display()))?;
    let mut run = config.resolve()?;
    run.data_views = manifest.spec.views;
    run.model_dim = manifest.spec.channels;
    run.model_patch = manifest.spec.patch;
    run.depth_bins = manifest.spec.bins.count;
    let model_cfg = run.model_config();
    let (model, _meta, _) = load_checkpoint(checkpoint, &model_cfg)?;

    let sample = load_sample(dataset_dir, &manifest, sample_name)?;
    let prepared = prepare_sample(&sample, &manifest.spec)?;
    let ctx = TrainContext::new(manifest.spec.clone(), sample.rig.clone())?;
    let pattern = sample_mask(
        mix(mask_seed, 0xd0c5),
        ctx.rows,
        ctx.cols,
        manifest.spec.views,
        run.train_mask_ratio,
    )?;

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let patches = tape.leaf(&prepared.patches);
    let tokens = encode(&mut tape, &bound, patches, &pattern)?;
    let mask_token = bound.get("mask_token");
    let filled = fill_mask(&mut tape, &tokens, mask_token, &pattern)?;
    let dec = decode(&mut tape, &bound, filled, &ctx.rig, ctx.rows, ctx.cols)?;
    let bev = geomim_core::lss::lift_splat(
        &mut tape,
        dec.fsem,
        dec.depth,
        &ctx.splat,
        ctx.spec.bev.nx,
        ctx.spec.bev.ny,
    )?;

    let fsem_ext = to_nchw(&mut tape, dec.fsem, ctx.rows, ctx.cols)?;
    let depth_ext = to_nchw(&mut tape, dec.depth, ctx.rows, ctx.cols)?;

    std::fs::create_dir_all(out)?;
    let fsem = tape.value(fsem_ext).clone();
    let depth = tape.value(depth_ext).clone();
    let bev_grid = tape.value(bev).clone();
    save_tensor(&out.join("fsem.bin"), "fsem", &fsem)?;
    save_tensor(&out.join("depth.bin"), "depth", &depth)?;
    save_tensor(&out.join("bev.bin"), "bev", &bev_grid)?;
    save_tensor(&out.join("teacher.bin"), "teacher", &sample.teacher)?;

    let (nx, ny) = (ctx.spec.bev.nx, ctx.spec.bev.ny);
    let cells = nx * ny;
    let channels = manifest.spec.channels;
    for (name, grid) in [("bev", &bev_grid), ("teacher", &sample.teacher)] {
        for c in 0..channels {
            min_max_png(
                &out.join(format!("{name}_c{c:03}.png")),
                &grid.data()[c * cells..(c + 1) * cells],
                ny,
                nx,
            )?;
        }
        let mean: Vec<f64> = (0..cells)
            .map(|i| {
                (0..channels).map(|c| grid.data()[c * cells + i]).sum::<f64>() / channels as f64
            })
            .collect();
        min_max_png(&out.join(format!("{name}_mean.png")), &mean, ny, nx)?;
    }
    // Expected depth per view from the predicted distribution, plus the
    // channel-mean of the semantic features.
    let centers = ctx.spec.bins.centers().to_vec();
    let (h, w) = (ctx.rows, ctx.cols);
    for view in 0..manifest.spec.views {
        let mut expected = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                for (b, &center) in centers.iter().enumerate() {
                    expected[i * w + j] += depth.at(&[view, b, i, j]) * center;
                }
            }
        }
        min_max_png(&out.join(format!("depth_v{view}.png")), &expected, w, h)?;
        let mut fmean = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                fmean[i * w + j] = (0..channels)
                    .map(|c| fsem.at(&[view, c, i, j]))
                    .sum::<f64>()
                    / channels as f64;
            }
        }
        min_max_png(&out.join(format!("fsem_v{view}.png")), &fmean, w, h)?;
    }
    println!(
        "dumped fsem.bin depth.bin bev.bin teacher.bin and PNGs to {}",
        out.display()
    );
    Ok(())
}
