// Experiment: pretraining on a fresh scene per step (no dataset reuse), then
// the transfer probe. Checks whether overfitting-free pretraining
// strengthens the pretrained-vs-random margin.

use geomim_core::camera::CameraRig;
use geomim_core::config::RunConfig;
use geomim_core::dataset::DatasetSpec;
use geomim_core::model::ModelParams;
use geomim_core::optim::AdamW;
use geomim_core::probe::{probe_comparison, ProbeConfig};
use geomim_core::rng::mix;
use geomim_core::scene::{generate_scene, render_views, teacher_bev};
use geomim_core::trainer::{prepare_sample, pretrain_step, TrainConfig, TrainContext};

fn fresh_sample(spec: &DatasetSpec, rig: &CameraRig, idx: u64) -> geomim_core::trainer::PreparedSample {
    let scene = generate_scene(mix(spec.seed, idx), &spec.scene).unwrap();
    let rendered = render_views(&scene, rig, spec.scene.num_classes);
    let teacher = teacher_bev(&scene, &spec.bev, spec.channels, spec.seed);
    let sample = geomim_core::dataset::Sample {
        scene,
        rig: rig.clone(),
        images: rendered.images,
        depth_maps: rendered.depth_maps,
        teacher,
    };
    prepare_sample(&sample, spec).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2400);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let run = RunConfig::default();
    let spec = run.dataset_spec().unwrap();
    let rig = CameraRig::ring(spec.views, spec.width, spec.height).unwrap();
    let ctx = TrainContext::new(spec.clone(), rig.clone()).unwrap();
    let cfg = TrainConfig {
        total_steps: steps,
        warmup_steps: 100,
        base_lr: lr,
        ..TrainConfig::from_run(&run)
    };
    let mut model = ModelParams::init(&run.model_config(), 0).unwrap();
    let mut opt = AdamW::new(cfg.betas, cfg.eps, cfg.weight_decay);
    let t0 = std::time::Instant::now();
    for step in 0..steps {
        let sample = fresh_sample(&spec, &rig, step as u64);
        let m = pretrain_step(&mut model, &mut opt, &ctx, &[&sample], step, &cfg).unwrap();
        if step % 400 == 0 || step + 1 == steps {
            println!("step {step}: total {:.5} rec {:.5} depth {:.4}", m.total, m.rec, m.depth);
        }
    }
    println!("pretrain {:.0}s", t0.elapsed().as_secs_f64());
    if let Some(dir) = args.get(3) {
        geomim_core::checkpoint::save_checkpoint(
            std::path::Path::new(dir),
            &model,
            Some(&opt),
            &geomim_core::checkpoint::CheckpointMeta {
                config_hash: run.hash(),
                step: steps,
                rng_state: cfg.seed,
                opt_step: opt.step_count,
            },
        )
        .unwrap();
    }

    let probe_cfg = ProbeConfig {
        steps: 500,
        lr: 1e-3,
        weight_decay: 0.01,
        train_scenes: 192,
        eval_scenes: 64,
        seed: 0,
        head_hidden: 0,
        cells: 4,
        batch: 1,
    };
    let results = probe_comparison(&model, &spec, &probe_cfg, &[0, 1, 2, 3, 4, 5]).unwrap();
    let mut wins = 0;
    for (i, (pre, ctl)) in results.iter().enumerate() {
        if pre.eval_loss < ctl.eval_loss {
            wins += 1;
        }
        println!(
            "seed {i}: pretrained {:.4}/{:.3} random {:.4}/{:.3} margin {:+.4}",
            pre.eval_loss, pre.iou, ctl.eval_loss, ctl.iou,
            ctl.eval_loss - pre.eval_loss
        );
    }
    println!("wins {wins}/6");
}
