use std::path::{Path, PathBuf};

use quadenhance::dataset::{make_synthetic_corpus, planted_theta};
use quadenhance::metrics::{evaluate_pair, EvalReport};
use quadenhance::nn::gradcheck::{self, CheckTarget};
use quadenhance::paired::{image_id, read_pair_manifest, train_paired_with, TrainHooks};
use quadenhance::unpaired::{train_phase1, train_phase2, GanHooks, GanState};
use quadenhance::{
    apply_transform, fit_least_squares, load_image, mean_lab_l2, save_image, Ablation, CoefficientMatrix,
    Enhancer, Error, GanConfig, PairedDataset, Result, TrainConfig, UnpairedDataset,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config;
use crate::{Command, Phase, TrainArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Enhance {
            model,
            input,
            output,
            theta_out,
            jobs,
        } => enhance(&model, &input, &output, theta_out.as_deref(), jobs),
        Command::ApplyTheta { theta, input, output } => {
            let theta = CoefficientMatrix::load(&theta)?;
            save_image(&apply_transform(&load_image(&input)?, &theta)?, &output)
        }
        Command::FitTheta {
            input,
            target,
            theta_out,
            ridge,
        } => fit_theta(&input, &target, &theta_out, ridge),
        Command::TrainPaired { manifest, common } => train_paired_cmd(&manifest, &common),
        Command::TrainUnpaired {
            manifest_x,
            manifest_y,
            phase,
            ablation,
            state_dir,
            resume,
            common,
        } => train_unpaired_cmd(
            &manifest_x,
            &manifest_y,
            phase,
            ablation.as_deref(),
            state_dir,
            resume.as_deref(),
            &common,
        ),
        Command::Evaluate { model, manifest, report } => evaluate(&model, &manifest, &report),
        Command::Gradcheck { layer, seed, cases } => gradcheck_cmd(&layer, seed, cases),
        Command::MakeSynthetic {
            count,
            size,
            out_dir,
            theta,
            noise,
            seed,
        } => {
            let theta = match theta {
                Some(p) => CoefficientMatrix::load(&p)?,
                None => planted_theta(&mut ChaCha8Rng::seed_from_u64(seed)),
            };
            let corpus = make_synthetic_corpus(count, size, &theta, noise, seed)?;
            corpus.write(&out_dir)?;
            eprintln!("wrote {count} pairs to {}", out_dir.display());
            Ok(())
        }
    }
}

fn is_supported(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
}

/// Supported image files directly inside `dir`, in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_supported(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn enhance_one(model: &Enhancer, input: &Path, output: &Path, theta_out: Option<&Path>) -> Result<()> {
    let img = load_image(input)?;
    let theta = model.predict_theta(&img)?;
    if let Some(t) = theta_out {
        theta.save(t)?;
    }
    save_image(&apply_transform(&img, &theta)?, output)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn enhance(model: &Path, input: &Path, output: &Path, theta_out: Option<&Path>, jobs: Option<usize>) -> Result<()> {
    let model = Enhancer::load(model)?;
    if !input.is_dir() {
        return enhance_one(&model, input, output, theta_out);
    }
    let files = list_images(input)?;
    create_dir(output)?;
    if let Some(t) = theta_out {
        create_dir(t)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {jobs:?} workers: {e}")))?;
    pool.install(|| {
        files.par_iter().try_for_each(|f| {
            let name = f.file_name().expect("listed file");
            let theta = theta_out.map(|t| t.join(format!("{}.theta.txt", image_id(f))));
            enhance_one(&model, f, &output.join(name), theta.as_deref())?;
            eprintln!("enhanced {}", f.display());
            Ok(())
        })
    })
}

fn fit_theta(input: &Path, target: &Path, theta_out: &Path, ridge: f64) -> Result<()> {
    let x = load_image(input)?;
    let y = load_image(target)?;
    let theta = fit_least_squares(&x, &y, ridge)?;
    theta.save(theta_out)?;
    let residual = mean_lab_l2(&apply_transform(&x, &theta)?, &y)?;
    println!("residual mean Lab L2: {residual}");
    Ok(())
}

fn history_path(args: &TrainArgs) -> PathBuf {
    args.history.clone().unwrap_or_else(|| args.out_model.with_extension("csv"))
}

fn train_paired_cmd(manifest: &Path, args: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    config::apply(&config::gather(args.config.as_deref(), &args.sets)?, |k, v| cfg.set(k, v))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = PairedDataset::from_manifest(manifest, args.resolution)?;
    eprintln!("training on {} pairs at {}x{}", data.len(), args.resolution, args.resolution);
    if let Some(d) = &args.checkpoint_dir {
        create_dir(d)?;
    }
    let mut progress = |r: &quadenhance::paired::EpochRecord| {
        eprintln!("epoch {:>4}  loss {:.4}  lr {:.2e}", r.epoch, r.mean_loss, r.lr);
    };
    let hooks = TrainHooks {
        checkpoint_dir: args.checkpoint_dir.as_deref(),
        on_epoch: Some(&mut progress),
        ..TrainHooks::default()
    };
    let run = train_paired_with(&data, &cfg, hooks)?;
    run.model.save(&args.out_model)?;
    run.history.write_csv(history_path(args))
}

fn train_unpaired_cmd(
    mx: &Path,
    my: &Path,
    phase: Phase,
    ablation: Option<&str>,
    state_dir: Option<PathBuf>,
    resume: Option<&Path>,
    args: &TrainArgs,
) -> Result<()> {
    let mut cfg = GanConfig::default();
    config::apply(&config::gather(args.config.as_deref(), &args.sets)?, |k, v| cfg.set(k, v))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(a) = ablation {
        a.parse::<Ablation>()?.configure(&mut cfg);
    }
    cfg.validate()?;
    let data = UnpairedDataset::from_manifests(mx, my, args.resolution)?;
    eprintln!("training on {} X and {} Y images", data.x.len(), data.y.len());
    if let Some(d) = &args.checkpoint_dir {
        create_dir(d)?;
    }
    let mut progress = |r: &quadenhance::unpaired::GanEpochRecord| {
        eprintln!("phase {} epoch {:>4}  cycle_y {:.4}  lr {:.2e}", r.phase, r.epoch, r.cycle_y, r.lr);
    };
    let mut hooks = GanHooks {
        on_epoch: Some(&mut progress),
        checkpoint_dir: args.checkpoint_dir.as_deref(),
        ..GanHooks::default()
    };
    let history = history_path(args);
    let (state, csv) = match phase {
        Phase::Two => {
            let dir = resume.ok_or_else(|| Error::InvalidArgument("--phase 2 needs --resume <state dir>".into()))?;
            let mut state = GanState::load_dir(dir)?;
            let h = train_phase2(&mut state, &data, &cfg, &mut hooks)?;
            (state, h.to_csv())
        }
        Phase::One | Phase::Both => {
            if resume.is_some() {
                return Err(Error::InvalidArgument("--resume only applies to --phase 2".into()));
            }
            let (mut state, h1) = train_phase1(&data, &cfg, &mut hooks)?;
            let mut csv = h1.to_csv();
            if phase == Phase::Both && cfg.phase2_enabled {
                let h2 = train_phase2(&mut state, &data, &cfg, &mut hooks)?;
                csv.push_str(h2.to_csv().split_once('\n').map_or("", |(_, rows)| rows));
            }
            (state, csv)
        }
    };
    state.pair.enhancer_x()?.save(&args.out_model)?;
    let dir = state_dir.unwrap_or_else(|| args.out_model.with_extension("state"));
    state.save_dir(&dir)?;
    std::fs::write(&history, csv).map_err(|e| Error::io(&history, e))
}

fn evaluate(model: &Path, manifest: &Path, report: &Path) -> Result<()> {
    let model = Enhancer::load(model)?;
    let pairs = read_pair_manifest(manifest)?;
    if pairs.is_empty() {
        return Err(Error::Manifest(format!("{} lists no pairs", manifest.display())));
    }
    let rows = pairs
        .par_iter()
        .map(|(x, y)| {
            let out = model.enhance(&load_image(x)?)?;
            evaluate_pair(image_id(x), &out, &load_image(y)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report_data = EvalReport::from_rows(rows)?;
    report_data.write_csv(report)?;
    println!("{report_data}");
    Ok(())
}

fn gradcheck_cmd(layer: &str, seed: u64, cases: usize) -> Result<()> {
    let targets = if layer == "all" {
        CheckTarget::all()
    } else {
        vec![layer.parse()?]
    };
    let mut failed = Vec::new();
    for t in targets {
        let report = gradcheck::run(t, cases, seed)?;
        println!("{report}");
        if !report.passed() {
            failed.push(t.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradientCheck(format!("{} exceeded tolerance", failed.join(", "))))
    }
}
